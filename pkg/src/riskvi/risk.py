"""Conditional value-at-risk and its C^1 surrogate.

v_eps is the piecewise-quadratic smoothing of (1-beta)^{-1} max(., 0) used
inside the CVaR minimization formula; beta = 0 recovers the risk-neutral
expectation. cvar_exact is the empirical (sorting-based) estimator used
only for validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RiskParams",
    "Control",
    "v_eps",
    "v_eps_prime",
    "saa_objective",
    "cvar_exact",
]


@dataclass(frozen=True)
class RiskParams:
    """Risk level beta in [0,1) and smoothing width epsilon > 0."""

    beta: float = 0.0
    epsilon: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def upper_break(self) -> float:
        """Start of the linear branch, eps*beta/(1-beta)."""
        return self.epsilon * self.beta / (1.0 - self.beta)


@dataclass
class Control:
    """Distributed control z (nodal values) plus the CVaR auxiliary s."""

    z: np.ndarray
    s: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.s = float(self.s)

    def copy(self) -> "Control":
        return Control(self.z.copy(), self.s)


def v_eps(s, params: RiskParams):
    """Smoothed tail function: -eps/2, s^2/(2 eps) + s, then linear slope
    1/(1-beta) for s >= eps*beta/(1-beta)."""
    s = np.asarray(s, dtype=float)
    eps, beta = params.epsilon, params.beta
    hi = params.upper_break
    out = np.where(
        s <= -eps,
        -eps / 2.0,
        np.where(
            s < hi,
            s * s / (2.0 * eps) + s,
            (s - eps * beta**2 / (2.0 * (1.0 - beta))) / (1.0 - beta),
        ),
    )
    return out if out.ndim else float(out)


def v_eps_prime(s, params: RiskParams):
    """Derivative of v_eps: 0, s/eps + 1, then 1/(1-beta)."""
    s = np.asarray(s, dtype=float)
    eps, beta = params.epsilon, params.beta
    hi = params.upper_break
    out = np.where(
        s <= -eps,
        0.0,
        np.where(s < hi, s / eps + 1.0, 1.0 / (1.0 - beta)),
    )
    return out if out.ndim else float(out)


def saa_objective(control: Control, per_sample_misfit, params: RiskParams, mass) -> float:
    """Sample-average objective s + (1/n) sum v_eps(misfit_i - s) + ||z||^2/2.

    misfit_i is the tracking value (1/2)||y_i - y_d||^2 per sample; the
    control cost uses the L2 mass matrix.
    """
    misfits = np.asarray(per_sample_misfit, dtype=float)
    if misfits.size == 0:
        raise ValueError("need at least one sample misfit")
    z = control.z
    control_cost = 0.5 * float(z @ (mass @ z))
    return control.s + float(np.mean(v_eps(misfits - control.s, params))) + control_cost


def cvar_exact(values, beta: float) -> float:
    """Empirical CVaR: the discrete Rockafellar-Uryasev minimum with the
    empirical beta-quantile as minimizer. beta = 0 gives the mean."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("need at least one value")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    if beta == 0.0:
        return float(np.mean(values))
    xs = np.sort(values)
    n = xs.size
    idx = int(np.ceil(beta * n)) - 1
    s_star = xs[max(idx, 0)]
    tail = np.maximum(xs - s_star, 0.0)
    return float(s_star + tail.mean() / (1.0 - beta))
