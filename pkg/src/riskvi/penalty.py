"""Penalized state solves and the obstacle-problem oracle.

The state constraint y >= 0 is enforced by the penalty term
-(1/tau) m(-y; tau_s) added to the Laplacian, where m is the C^1
piecewise-quadratic smoothing of the positive part with width
tau_s = tau^1.1 (the penalty factor and smoothing width are decoupled).
The approximate multiplier is zeta_tau = (1/tau) m(-y) >= 0. The
projected Gauss-Seidel solver is a slow, independent reference for the
discrete complementarity system and is never used in the optimization
loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import mesh as fem
from .benchmark import BenchmarkInstance
from .mesh import FemFunction, SolverError, as_values

__all__ = [
    "PenaltyParams",
    "StateSolve",
    "NewtonError",
    "m_tau",
    "m_tau_prime",
    "solve_state",
    "solve_obstacle_reference",
    "complementarity_residuals",
]

SMOOTHING_EXPONENT = 1.1
MIN_DAMPING = 2.0**-20


@dataclass(frozen=True)
class PenaltyParams:
    """Penalization weight tau > 0 with smoothing width tau^1.1."""

    tau: float
    smoothing_exponent: float = SMOOTHING_EXPONENT

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def tau_s(self) -> float:
        return self.tau**self.smoothing_exponent


@dataclass
class StateSolve:
    """Converged penalized state with its multiplier approximation."""

    y: FemFunction
    newton_iterations: int
    final_residual: float
    initial_residual: float
    zeta: FemFunction


class NewtonError(SolverError):
    pass


def m_tau(r, tau_s: float):
    """C^1 smoothing of max(0, r): 0, r^2/(2 tau_s), then r - tau_s/2."""
    r = np.asarray(r, dtype=float)
    out = np.where(
        r <= 0.0,
        0.0,
        np.where(r < tau_s, r * r / (2.0 * tau_s), r - tau_s / 2.0),
    )
    return out if out.ndim else float(out)


def m_tau_prime(r, tau_s: float):
    """Derivative of m_tau: 0, r/tau_s, then 1."""
    r = np.asarray(r, dtype=float)
    out = np.where(r <= 0.0, 0.0, np.where(r < tau_s, r / tau_s, 1.0))
    return out if out.ndim else float(out)


def _penalty_term(y, weights, params):
    """Nodally lumped penalty residual contribution -(1/tau) W m(-y)."""
    return -(weights * m_tau(-y, params.tau_s)) / params.tau


def state_residual(instance, y, load, params):
    """Nodal residual K y - (1/tau) W m(-y) - load (boundary rows = y)."""
    r = instance.stiffness_bc @ y + _penalty_term(y, instance.lumped_weights, params)
    return r - load


def state_jacobian(instance, y, params):
    """K + (1/tau) diag(W m'(-y)); symmetric positive definite."""
    pen = instance.lumped_weights * m_tau_prime(-y, params.tau_s) / params.tau
    return (instance.stiffness_bc + sp.diags(pen)).tocsr()


def solve_state(
    instance: BenchmarkInstance,
    z,
    xi: np.ndarray,
    params: PenaltyParams,
    newton_rel_tol: float = 1e-8,
    y0: np.ndarray | None = None,
    max_newton: int = 50,
    cg_rel_tol: float = 1e-10,
    load: np.ndarray | None = None,
) -> StateSolve:
    """Damped Newton solve of the penalized state equation.

    Solves K y - (1/tau) W m(-y) = load(f(., xi) + z) with homogeneous
    Dirichlet conditions, warm-started from y0 when given. The stopping
    tolerance is newton_rel_tol relative to max(initial residual, load
    norm), so a warm start that is already converged returns immediately
    and bitwise unchanged. ``load`` overrides the assembled right-hand
    side (testing hook for synthetic loads).
    """
    if load is None:
        load = instance.state_load(as_values(z), xi)
    y = np.zeros(instance.n_nodes) if y0 is None else np.array(y0, dtype=float)

    r = state_residual(instance, y, load, params)
    res0 = float(np.linalg.norm(r))
    tol = newton_rel_tol * max(res0, float(np.linalg.norm(load)))
    res = res0
    history = [res]
    iterations = 0
    while res > tol:
        if iterations >= max_newton:
            raise NewtonError(
                f"Newton did not converge in {max_newton} iterations "
                f"(residual {res:.3e}, target {tol:.3e})",
                achieved_residual=res,
                history=history,
            )
        H = state_jacobian(instance, y, params)
        delta = fem.solve_sparse(H, -r, rel_tol=cg_rel_tol)
        alpha = 1.0
        while True:
            y_new = y + alpha * delta
            r_new = state_residual(instance, y_new, load, params)
            res_new = float(np.linalg.norm(r_new))
            if res_new < res or res_new <= tol:
                break
            alpha *= 0.5
            if alpha < MIN_DAMPING:
                raise NewtonError(
                    f"Newton damping fell below 2^-20 at residual {res:.3e}",
                    achieved_residual=res,
                    history=history,
                )
        y, r, res = y_new, r_new, res_new
        history.append(res)
        iterations += 1

    zeta = m_tau(-y, params.tau_s) / params.tau
    return StateSolve(
        y=FemFunction(instance.mesh, y),
        newton_iterations=iterations,
        final_residual=res,
        initial_residual=res0,
        zeta=FemFunction(instance.mesh, zeta),
    )


def solve_obstacle_reference(
    instance: BenchmarkInstance,
    z,
    xi: np.ndarray,
    tol: float = 1e-10,
    max_sweeps: int = 1_000_000,
    load: np.ndarray | None = None,
) -> FemFunction:
    """Projected Gauss-Seidel solve of K y - zeta = load, y >= 0,
    zeta >= 0, zeta^T y = 0 (oracle only).

    Sweeps run over interior nodes in index order; convergence is measured
    by the max norm of min(y, K y - load), the natural residual of the
    complementarity system.
    """
    if load is None:
        load = instance.state_load(as_values(z), xi)
    K = instance.stiffness_bc.tocsr()
    indptr, indices, data = K.indptr, K.indices, K.data
    diag = K.diagonal()
    y = np.zeros(instance.n_nodes)
    interior = np.flatnonzero(instance.interior)

    rows = [(indices[indptr[i]:indptr[i + 1]], data[indptr[i]:indptr[i + 1]])
            for i in interior]

    for sweep in range(max_sweeps):
        for pos, i in enumerate(interior):
            cols, vals = rows[pos]
            acc = vals @ y[cols] - diag[i] * y[i]
            y[i] = max(0.0, (load[i] - acc) / diag[i])
        if sweep % 5 == 4 or sweep == 0:
            residual = K @ y - load
            natural = np.minimum(y, residual)[interior]
            if np.max(np.abs(natural)) <= tol:
                return FemFunction(instance.mesh, y)
    raise SolverError(
        f"projected Gauss-Seidel did not reach {tol:g} in {max_sweeps} sweeps",
        achieved_residual=float(np.max(np.abs(np.minimum(y, K @ y - load)[interior]))),
    )


def complementarity_residuals(y, zeta, mass) -> tuple[float, float]:
    """(violation, pairing) = (||min(y,0)||_L2, |<zeta, y>| via mass)."""
    ya, za = as_values(y), as_values(zeta)
    neg = np.minimum(ya, 0.0)
    violation = float(np.sqrt(max(neg @ (mass @ neg), 0.0)))
    pairing = abs(float(za @ (mass @ ya)))
    return violation, pairing
