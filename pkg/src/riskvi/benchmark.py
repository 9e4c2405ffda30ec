"""The unit-square test instance with a biactive deterministic solution.

Deterministic data: a bump state y_hat supported on (0,1/2)^2 that also
serves as the reference control, a multiplier zeta_hat supported away from
it (so strict complementarity fails on a set of positive area), the
piecewise-classical Laplacian of y_hat, the tracking target
y_d = y_hat + zeta_hat - lap(y_hat), and the random load
f(x, xi) = -lap(y_hat) - y_hat - zeta_hat - b(x, xi).

Nodal interpolants of all data fields are kept for export and pointwise
checks, but loads and the tracking functional are assembled by elementwise
quadrature of the exact formulas: lap(y_hat) jumps across the mesh-aligned
lines x1 = 1/2 and x2 = 1/2, and a nodal interpolant of y_d loses an O(h)
share of that jump energy, which visibly shifts the attainable objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fields, mesh as fem
from .fields import KlExpansion
from .mesh import ElementQuadrature, FemFunction, Mesh
from .risk import RiskParams

__all__ = [
    "BenchmarkInstance",
    "y_hat",
    "zeta_hat",
    "lap_y_hat",
    "build_instance",
    "build_rhs",
    "build_target",
]


def _bump(t):
    """g(t) = t^3 - t^2 + t/4 = t (t - 1/2)^2."""
    return t * (t - 0.5) ** 2


def _bump_dd(t):
    return 6.0 * t - 2.0


def y_hat(x1, x2):
    """Reference state/control: 160 g(x1) g(x2) on (0,1/2)^2, else 0."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    inside = (x1 > 0) & (x1 < 0.5) & (x2 > 0) & (x2 < 0.5)
    out = np.where(inside, 160.0 * _bump(x1) * _bump(x2), 0.0)
    return out if out.ndim else float(out)


def zeta_hat(x1, x2):
    """Reference multiplier max(0, -2|x1-0.8| - 2|x1 x2 - 0.3| + 0.5)."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    out = np.maximum(0.0, -2.0 * np.abs(x1 - 0.8) - 2.0 * np.abs(x1 * x2 - 0.3) + 0.5)
    return out if out.ndim else float(out)


def lap_y_hat(x1, x2):
    """Piecewise-classical Laplacian of y_hat (0 outside (0,1/2)^2).

    y_hat is C^1 across the support boundary (g and g' vanish at 1/2), so
    the piecewise formula represents the distributional Laplacian up to the
    measure-zero interface.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    inside = (x1 > 0) & (x1 < 0.5) & (x2 > 0) & (x2 < 0.5)
    val = 160.0 * (_bump_dd(x1) * _bump(x2) + _bump(x1) * _bump_dd(x2))
    out = np.where(inside, val, 0.0)
    return out if out.ndim else float(out)


def _target(x1, x2):
    return y_hat(x1, x2) + zeta_hat(x1, x2) - lap_y_hat(x1, x2)


def _f_deterministic(x1, x2):
    return -lap_y_hat(x1, x2) - y_hat(x1, x2) - zeta_hat(x1, x2)


@dataclass(frozen=True)
class BenchmarkInstance:
    """Immutable discretization + data bundle shared by all solvers.

    Matrices, quadrature data and the per-node field-mode matrix are
    assembled once; the bundle is safe to share across concurrent sample
    solves.
    """

    mesh: Mesh
    stiffness: sp.csr_matrix          # K without boundary conditions
    mass: sp.csr_matrix               # consistent mass matrix
    stiffness_bc: sp.csr_matrix       # K after symmetric Dirichlet elimination
    lumped_weights: np.ndarray        # nodal weights, zero on the boundary
    interior: np.ndarray              # boolean interior-node mask
    quad: ElementQuadrature
    y_hat: FemFunction
    zeta_hat: FemFunction
    lap_y_hat: FemFunction
    y_d: FemFunction                  # nodal interpolant (exports, checks)
    target_load: np.ndarray           # integral(y_d phi_i), exact data at quadrature
    target_sq: float                  # integral(y_d^2), same quadrature
    f_det_load: np.ndarray            # integral(f_deterministic phi_i)
    f_deterministic: np.ndarray       # nodal -lap(y_hat) - y_hat - zeta_hat
    expansion: KlExpansion
    field_modes: np.ndarray           # (n_nodes, m) sqrt(lambda_i) phi_i masked
    field_mask: np.ndarray            # support mask per node
    qp_modes: np.ndarray              # (n_el*nq, m) mode values at quadrature points
    qp_mask: np.ndarray               # support mask at quadrature points
    mode_loads: np.ndarray | None     # (n_nodes, m) per-mode loads (mean-zero only)
    risk: RiskParams
    obstacle_is_zero: bool = True

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    def l2_inner(self, v, w) -> float:
        return fem.l2_inner(self.mass, v, w)

    def l2_norm(self, v) -> float:
        return fem.l2_norm(self.mass, v)

    def h1_norm(self, v) -> float:
        return fem.h1_norm(self.stiffness, self.mass, v)

    def field_values(self, xi: np.ndarray) -> np.ndarray:
        """Nodal values of b(., xi)."""
        xi = np.asarray(xi, dtype=float)
        series = self.field_modes @ xi
        if self.expansion.kind == fields.MEAN_ZERO:
            return series
        return np.where(self.field_mask, np.exp(self.expansion.shift + series), 0.0)

    def rhs_values(self, xi: np.ndarray) -> np.ndarray:
        """Nodal values of f(., xi)."""
        return self.f_deterministic - self.field_values(xi)

    def field_load(self, xi: np.ndarray) -> np.ndarray:
        """Load vector integral(b(., xi) phi_i) by quadrature."""
        xi = np.asarray(xi, dtype=float)
        if self.mode_loads is not None:
            return self.mode_loads @ xi
        series = self.qp_modes @ xi
        b_qp = np.where(self.qp_mask, np.exp(self.expansion.shift + series), 0.0)
        n_el, nq = self.quad.weights.shape
        return fem.assemble_load(self.mesh, self.quad, b_qp.reshape(n_el, nq))

    def state_load(self, z, xi: np.ndarray) -> np.ndarray:
        """Dirichlet-reduced load vector of f(., xi) + z."""
        load = self.f_det_load - self.field_load(xi) + self.mass @ fem.as_values(z)
        load[~self.interior] = 0.0
        return load

    def misfit(self, y) -> float:
        """Tracking value (1/2) integral((y - y_d)^2) with exact data."""
        ya = fem.as_values(y)
        val = 0.5 * float(ya @ (self.mass @ ya)) - float(self.target_load @ ya) \
            + 0.5 * self.target_sq
        return max(val, 0.0)

    def tracking_residual(self, y) -> np.ndarray:
        """Gradient of the tracking value, M y - integral(y_d phi_i)."""
        return self.mass @ fem.as_values(y) - self.target_load


def build_instance(
    nx: int,
    ny: int | None = None,
    order: int = 1,
    noise: str = fields.MEAN_ZERO,
    beta: float = 0.0,
    epsilon: float = 0.05,
    kl_terms: int | None = None,
) -> BenchmarkInstance:
    """Assemble the benchmark problem on an nx-by-ny mesh.

    kl_terms defaults to 20 for the mean-zero model and 100 for the
    lognormal model.
    """
    if ny is None:
        ny = nx
    mesh = fem.build_mesh(nx, ny, order=order)
    K = fem.assemble_stiffness(mesh)
    M = fem.assemble_mass(mesh)
    Kbc, _ = fem.apply_dirichlet(K, np.zeros(mesh.n_nodes), mesh)
    interior = mesh.interior_mask()
    W = fem.lumped_mass_weights(mesh, M)
    W = np.where(interior, W, 0.0)
    quad = fem.element_quadrature(mesh)

    x1, x2 = mesh.nodes[:, 0], mesh.nodes[:, 1]
    yh = y_hat(x1, x2)
    zh = zeta_hat(x1, x2)
    lap = lap_y_hat(x1, x2)

    q1 = quad.points[:, :, 0]
    q2 = quad.points[:, :, 1]
    yd_qp = _target(q1, q2)
    target_load = fem.assemble_load(mesh, quad, yd_qp)
    target_sq = fem.integrate_quadrature(quad, yd_qp**2)
    f_det_load = fem.assemble_load(mesh, quad, _f_deterministic(q1, q2))

    if noise == fields.MEAN_ZERO:
        expansion = fields.cosine_eigenpairs(kl_terms or 20)
    elif noise == fields.LOGNORMAL:
        expansion = fields.lognormal_eigenpairs(kl_terms or 100)
    else:
        raise ValueError(f"unknown noise model {noise!r}")
    modes, mask = fields.field_matrix(expansion, mesh.nodes)
    qp_flat = quad.points.reshape(-1, 2)
    qp_modes, qp_mask = fields.field_matrix(expansion, qp_flat)
    mode_loads = None
    if noise == fields.MEAN_ZERO:
        n_el, nq = quad.weights.shape
        mode_loads = np.column_stack(
            [
                fem.assemble_load(mesh, quad, qp_modes[:, k].reshape(n_el, nq))
                for k in range(expansion.m)
            ]
        )

    return BenchmarkInstance(
        mesh=mesh,
        stiffness=K,
        mass=M,
        stiffness_bc=Kbc,
        lumped_weights=W,
        interior=interior,
        quad=quad,
        y_hat=FemFunction(mesh, yh),
        zeta_hat=FemFunction(mesh, zh),
        lap_y_hat=FemFunction(mesh, lap),
        y_d=FemFunction(mesh, yh + zh - lap),
        target_load=target_load,
        target_sq=target_sq,
        f_det_load=f_det_load,
        f_deterministic=-lap - yh - zh,
        expansion=expansion,
        field_modes=modes,
        field_mask=mask,
        qp_modes=qp_modes,
        qp_mask=qp_mask,
        mode_loads=mode_loads,
        risk=RiskParams(beta=beta, epsilon=epsilon),
    )


def build_rhs(instance: BenchmarkInstance, xi: np.ndarray) -> FemFunction:
    """Nodal interpolant of f(., xi) = -lap(y_hat) - y_hat - zeta_hat - b."""
    return FemFunction(instance.mesh, instance.rhs_values(xi))


def build_target(instance: BenchmarkInstance) -> FemFunction:
    """Nodal interpolant of y_d = y_hat + zeta_hat - lap(y_hat)."""
    return instance.y_d
