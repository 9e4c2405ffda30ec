"""Path-following stochastic variance-reduced gradient driver.

Outer loop: the penalization weight tau is multiplied by gamma until it
reaches tau_final. Middle loop: at the current control a full sweep gives
the reference gradient g_hat and the termination residual; while the
residual exceeds tol, one variance-reduced epoch runs. Inner loop: n_k
steps u <- u - t_kl (G(u, xi_i) - G(u_snapshot, xi_i) + g_hat), with the
snapshot gradients reused from the sweep that produced g_hat.

Randomness comes from one run-level PCG64 stream seeded from the master
seed: all epoch lengths n_k are pre-drawn first, then each epoch draws its
index vector at epoch start. Together with the caller-owned warm-start
states this makes a run byte-reproducible for a fixed config, independent
of the worker count used for sweeps.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import gradient as grad
from .benchmark import BenchmarkInstance
from .fields import SampleSet, sample_xi
from .gradient import StationarityReport, SweepResult, WarmStore
from .mesh import FemFunction
from .penalty import PenaltyParams
from .risk import Control, saa_objective, v_eps_prime
from ._util import atomic_write, fmt

__all__ = [
    "SvrgConfig",
    "StepRule",
    "EpochRecord",
    "RunReport",
    "step_constants",
    "step_size",
    "svrg_epoch",
    "run_path_following",
    "write_history_csv",
]

log = logging.getLogger(__name__)

DRIVER_STREAM_TAG = 0xD1CE  # second word of the driver PRNG seed
PREDRAWN_EPOCHS = 5000      # epoch lengths drawn up front


@dataclass(frozen=True)
class SvrgConfig:
    """Algorithm parameters for one path-following run."""

    tau_initial: float = 1e-1
    tau_final: float = 1e-6
    gamma: float = 0.1
    update_frequency: int = 1000
    tol: float | None = None      # default 5e-4 * h^2, set from the mesh
    seed: int = 1
    n: int = 500
    max_middle: int = 200
    z_init: float = 1.0
    s_init: float = 1.0
    newton_rel_tol: float = 1e-8
    adjoint_rel_tol: float = 1e-8
    workers: int = 1
    strict: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau_final <= self.tau_initial:
            raise ValueError("need 0 < tau_final <= tau_initial")
        if self.update_frequency < 1:
            raise ValueError("update_frequency must be >= 1")
        if self.tol is not None and self.tol <= 0.0:
            raise ValueError("tol must be positive")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class StepRule:
    """Constants of the step-size rule t_kl = sqrt(theta / (k l + nu))."""

    theta: float
    nu: float


def step_constants() -> StepRule:
    """Solve the coupled definitions theta = 1/(2 nu) + 1 and
    nu = 2 theta/(2 nu - 1) - 1.

    Eliminating theta gives 2 nu^3 + nu^2 - 3 nu - 1 = 0, which has a
    single root with nu > 1; it is found by bisection on [1, 2].
    """
    fn = lambda nu: 2.0 * nu**3 + nu**2 - 3.0 * nu - 1.0
    lo, hi = 1.0, 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if fn(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    nu = 0.5 * (lo + hi)
    return StepRule(theta=1.0 / (2.0 * nu) + 1.0, nu=nu)


def step_size(rule: StepRule, k: int, l: int) -> float:
    """t_kl = sqrt(theta / (k l + nu)) for epoch k >= 1, inner step l >= 1."""
    if k < 1 or l < 1:
        raise ValueError("step indices start at 1")
    return float(np.sqrt(rule.theta / (k * l + rule.nu)))


@dataclass
class EpochRecord:
    """One middle-loop iteration: sweep at the current control, then
    (unless converged) one epoch of n_k inner steps."""

    tau: float
    epoch: int
    objective: float
    residual: float
    n_k: int
    full_grad_count: int
    pde_solves: int


@dataclass
class RunReport:
    """Full outcome of a path-following run."""

    rows: list[EpochRecord]
    control: Control
    mean_state: FemFunction
    mean_multiplier: FemFunction
    stationarity: StationarityReport
    converged: bool
    non_converged_taus: list[float]
    full_gradients: int
    pde_solves: int
    inner_steps: int
    tol: float
    seed: int
    wall_seconds: float
    objective: float
    residual: float


def _epoch_inner(
    instance: BenchmarkInstance,
    u1: Control,
    samples: SampleSet,
    params: PenaltyParams,
    rule: StepRule,
    k: int,
    indices: np.ndarray,
    snapshot: SweepResult,
    newton_rel_tol: float,
    adjoint_rel_tol: float,
) -> tuple[Control, np.ndarray, np.ndarray]:
    """Run the inner loop of one epoch; returns the new control and the
    per-sample warm states as updated by the fresh solves."""
    risk = instance.risk
    ref_scale = v_eps_prime(snapshot.misfits - u1.s, risk)
    ghat_z = snapshot.ps.mean(axis=0) + u1.z
    ghat_s = float(np.mean(1.0 - ref_scale))

    warm_y = snapshot.ys.copy()
    warm_p = snapshot.ps.copy()
    z = u1.z.copy()
    s = u1.s
    for l, i in enumerate(indices, start=1):
        y, p, misfit = grad._sample_solve(
            instance, z, s, samples.samples[i], params,
            newton_rel_tol, adjoint_rel_tol, y0=warm_y[i], p0=warm_p[i],
        )
        scale = float(v_eps_prime(misfit - s, risk))
        dir_z = (p + z) - (snapshot.ps[i] + u1.z) + ghat_z
        dir_s = (1.0 - scale) - (1.0 - float(ref_scale[i])) + ghat_s
        if l == 1:
            # Variance-reduction identity: at the snapshot the correction
            # cancels and the update direction is exactly the full gradient.
            if not (
                np.allclose(dir_z, ghat_z, rtol=0.0, atol=1e-12)
                and abs(dir_s - ghat_s) <= 1e-12
            ):
                raise AssertionError(
                    "variance-reduction identity violated at epoch start"
                )
        t = step_size(rule, k, l)
        z = z - t * dir_z
        s = s - t * dir_s
        warm_y[i], warm_p[i] = y, p
    return Control(z, s), warm_y, warm_p


def svrg_epoch(
    instance: BenchmarkInstance,
    u_tilde: Control,
    samples: SampleSet,
    params: PenaltyParams,
    rule: StepRule,
    k: int,
    rng: np.random.Generator,
    n_k: int | None = None,
    snapshot: SweepResult | None = None,
    **solve_kwargs,
) -> Control:
    """One variance-reduced epoch starting from the snapshot u_tilde.

    Draws n_k uniformly from {1, ..., update_frequency} unless given, then
    n_k indices uniformly from the sample set, and applies the corrected
    stochastic updates to both control components. Snapshot gradients
    G(u_tilde, xi_i) are read from the full-gradient sweep at u_tilde
    (computed here if not supplied), which is the pure-function equivalent
    of caching them per drawn index.
    """
    newton_rel_tol = solve_kwargs.pop("newton_rel_tol", 1e-8)
    adjoint_rel_tol = solve_kwargs.pop("adjoint_rel_tol", 1e-8)
    update_frequency = solve_kwargs.pop("update_frequency", 1000)
    if solve_kwargs:
        raise TypeError(f"unknown arguments {sorted(solve_kwargs)}")
    if n_k is None:
        n_k = int(rng.integers(1, update_frequency + 1))
    if snapshot is None:
        snapshot = grad.sweep_samples(
            instance, u_tilde, samples, params,
            newton_rel_tol=newton_rel_tol, adjoint_rel_tol=adjoint_rel_tol,
        )
    indices = rng.integers(0, samples.n, size=n_k)
    control, _, _ = _epoch_inner(
        instance, u_tilde, samples, params, rule, k, indices, snapshot,
        newton_rel_tol, adjoint_rel_tol,
    )
    return control


def run_path_following(instance: BenchmarkInstance, config: SvrgConfig) -> RunReport:
    """Execute the full tau ladder and return the terminal report.

    Each middle-loop iteration performs one sweep over the samples (the
    full gradient, the objective and the termination residual all come
    from it), then one epoch while the residual exceeds tol. The middle
    loop is capped at max_middle epochs per tau; a capped tau is recorded
    as non-converged and the ladder continues (strict mode raises).
    """
    t_start = time.perf_counter()
    tol = config.tol if config.tol is not None else 5e-4 * instance.mesh.h**2
    rule = step_constants()
    samples = sample_xi(instance.expansion, config.n, seed=config.seed)
    rng = np.random.default_rng([config.seed, DRIVER_STREAM_TAG])
    epoch_lengths = rng.integers(1, config.update_frequency + 1, size=PREDRAWN_EPOCHS)

    taus = []
    tau = config.tau_initial
    while tau > config.tau_final and not np.isclose(tau, config.tau_final, rtol=1e-9):
        taus.append(tau)
        tau *= config.gamma
    taus.append(config.tau_final)

    u = Control(np.full(instance.n_nodes, config.z_init), config.s_init)
    u.z[~instance.interior] = 0.0
    store = WarmStore.zeros(config.n, instance.n_nodes)
    pool = None
    if config.workers > 1:
        pool = grad.make_pool(
            instance, samples, config.workers,
            newton_rel_tol=config.newton_rel_tol,
            adjoint_rel_tol=config.adjoint_rel_tol,
        )

    rows: list[EpochRecord] = []
    non_converged: list[float] = []
    k_global = 1
    epoch_counter = 0
    fg_count = 0
    pde_count = 0
    inner_total = 0
    last_sweep: SweepResult | None = None
    objective = float("nan")
    res = float("nan")

    try:
        for tau in taus:
            params = PenaltyParams(tau)
            middle = 0
            while True:
                sweep = grad.sweep_samples(
                    instance, u, samples, params,
                    store=store, pool=pool, workers=config.workers,
                    newton_rel_tol=config.newton_rel_tol,
                    adjoint_rel_tol=config.adjoint_rel_tol,
                )
                fg_count += 1
                pde_count += sweep.pde_solves
                last_sweep = sweep
                objective = saa_objective(u, sweep.misfits, instance.risk, instance.mass)
                res = grad.residual_from_sweep(instance, u, sweep)

                if res <= tol:
                    rows.append(EpochRecord(tau, k_global, objective, res, 0,
                                            fg_count, pde_count))
                    log.info("tau=%.1e converged: objective=%.7f residual=%.3e",
                             tau, objective, res)
                    break
                if middle >= config.max_middle:
                    non_converged.append(tau)
                    rows.append(EpochRecord(tau, k_global, objective, res, 0,
                                            fg_count, pde_count))
                    msg = (f"middle loop cap {config.max_middle} reached at "
                           f"tau={tau:g} (residual {res:.3e} > tol {tol:.3e})")
                    if config.strict:
                        raise RuntimeError(msg)
                    log.warning("%s; continuing", msg)
                    break

                n_k = int(epoch_lengths[epoch_counter])
                epoch_counter += 1
                if epoch_counter >= PREDRAWN_EPOCHS:
                    raise RuntimeError("exhausted pre-drawn epoch lengths")
                indices = rng.integers(0, config.n, size=n_k)
                u, warm_y, warm_p = _epoch_inner(
                    instance, u, samples, params, rule, k_global, indices,
                    sweep, config.newton_rel_tol, config.adjoint_rel_tol,
                )
                store.ys, store.ps = warm_y, warm_p
                pde_count += 2 * n_k
                inner_total += n_k
                rows.append(EpochRecord(tau, k_global, objective, res, n_k,
                                        fg_count, pde_count))
                k_global += 1
                middle += 1
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    mean_y = last_sweep.ys.mean(axis=0)
    from .penalty import m_tau  # local import to avoid a cycle at module load

    params_final = PenaltyParams(taus[-1])
    zetas = m_tau(-last_sweep.ys, params_final.tau_s) / params_final.tau
    mean_zeta = zetas.mean(axis=0)

    stationarity = grad.stationarity_report(
        instance, u, samples, params_final,
        newton_rel_tol=config.newton_rel_tol,
        adjoint_rel_tol=config.adjoint_rel_tol,
        warm=store,
    )

    return RunReport(
        rows=rows,
        control=u,
        mean_state=FemFunction(instance.mesh, mean_y),
        mean_multiplier=FemFunction(instance.mesh, mean_zeta),
        stationarity=stationarity,
        converged=not non_converged,
        non_converged_taus=non_converged,
        full_gradients=fg_count,
        pde_solves=pde_count,
        inner_steps=inner_total,
        tol=tol,
        seed=config.seed,
        wall_seconds=time.perf_counter() - t_start,
        objective=objective,
        residual=res,
    )


def write_history_csv(path, report: RunReport) -> None:
    """Per-middle-iteration history (atomic).

    Wall time is deliberately not a column: histories of identical runs
    must be byte-identical regardless of worker count; timing lives in the
    run summary instead.
    """
    lines = ["tau,epoch,objective,residual,n_k,full_grad_count,pde_solves"]
    for r in report.rows:
        lines.append(
            f"{fmt(r.tau)},{r.epoch},{fmt(r.objective)},{fmt(r.residual)},"
            f"{r.n_k},{r.full_grad_count},{r.pde_solves}"
        )
    atomic_write(path, "\n".join(lines) + "\n")
