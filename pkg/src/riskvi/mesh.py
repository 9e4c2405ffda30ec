"""Structured triangular finite elements on the unit square.

P1 (vertex) and P2 (vertex plus edge-midpoint) Lagrange elements on a
right-diagonal triangulation of (0,1)^2, with sparse assembly of stiffness
and mass matrices, symmetric homogeneous-Dirichlet elimination, a
Jacobi-preconditioned conjugate-gradient solver, L2/H1 products, nodal
interpolation, and field export as CSV / legacy-VTK text.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._util import atomic_write

__all__ = [
    "Mesh",
    "FemFunction",
    "SolverError",
    "build_mesh",
    "assemble_stiffness",
    "assemble_mass",
    "lumped_mass_weights",
    "apply_dirichlet",
    "solve_sparse",
    "l2_inner",
    "l2_norm",
    "h1_norm",
    "interpolate",
    "element_quadrature",
    "assemble_load",
    "integrate_quadrature",
    "export_field_csv",
    "export_field_vtk",
]


# Degree-4 Dunavant rule on the reference triangle in barycentric form,
# used for P2 assembly (P2 mass integrands are degree 4).
_QUAD_BARY = np.array(
    [
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
    ]
)
_QUAD_W = np.array(
    [
        0.223381589678011,
        0.223381589678011,
        0.223381589678011,
        0.109951743655322,
        0.109951743655322,
        0.109951743655322,
    ]
)


class SolverError(RuntimeError):
    """Raised when an iterative solve fails to reach its tolerance."""

    def __init__(self, message, achieved_residual=None, history=None):
        super().__init__(message)
        self.achieved_residual = achieved_residual
        self.history = history


@dataclass(frozen=True)
class Mesh:
    """Right-diagonal triangulation of the unit square.

    ``elements`` holds one row per triangle; the first three columns are the
    vertex indices (counter-clockwise), and for ``order == 2`` columns 3..5
    are the midpoint nodes of edges (v0,v1), (v1,v2), (v2,v0).
    """

    nx: int
    ny: int
    order: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary_nodes: np.ndarray
    h: float

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def interior_mask(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return mask


@dataclass
class FemFunction:
    """Nodal coefficient vector attached to a mesh."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError(
                f"coefficient vector has length {self.values.shape}, "
                f"mesh has {self.mesh.n_nodes} nodes"
            )


def as_values(v) -> np.ndarray:
    """Coefficient vector of a FemFunction, or the array itself."""
    if isinstance(v, FemFunction):
        return v.values
    return np.asarray(v, dtype=float)


def build_mesh(nx: int, ny: int, order: int = 1) -> Mesh:
    """Triangulate the unit square with nx-by-ny cells split along the
    right diagonal.

    For ``order == 2`` the node set is the refined (2nx+1)-by-(2ny+1) grid,
    so edge midpoints (including the diagonal midpoints at cell centres)
    are nodes.
    """
    if nx < 2 or ny < 2:
        raise ValueError(f"need nx, ny >= 2, got nx={nx}, ny={ny}")
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")

    px, py = order * nx + 1, order * ny + 1
    xs = np.linspace(0.0, 1.0, px)
    ys = np.linspace(0.0, 1.0, py)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(ix, iy):
        return iy * px + ix

    elements = []
    for j in range(ny):
        for i in range(nx):
            i0, j0 = order * i, order * j
            a = nid(i0, j0)
            b = nid(i0 + order, j0)
            c = nid(i0 + order, j0 + order)
            d = nid(i0, j0 + order)
            if order == 1:
                elements.append((a, b, c))
                elements.append((a, c, d))
            else:
                m_ab = nid(i0 + 1, j0)
                m_bc = nid(i0 + 2, j0 + 1)
                m_ca = nid(i0 + 1, j0 + 1)
                m_cd = nid(i0 + 1, j0 + 2)
                m_da = nid(i0, j0 + 1)
                elements.append((a, b, c, m_ab, m_bc, m_ca))
                elements.append((a, c, d, m_ca, m_cd, m_da))
    elements = np.asarray(elements, dtype=np.int64)

    ix, iy = np.meshgrid(np.arange(px), np.arange(py), indexing="xy")
    on_edge = (ix == 0) | (ix == px - 1) | (iy == 0) | (iy == py - 1)
    boundary = np.flatnonzero(on_edge.ravel())

    verts = nodes[elements[:, :3]]
    edges = np.linalg.norm(
        verts - verts[:, [1, 2, 0], :], axis=2
    )
    h = float(edges.max())
    return Mesh(nx=nx, ny=ny, order=order, nodes=nodes, elements=elements,
                boundary_nodes=boundary, h=h)


def _vertex_geometry(mesh: Mesh):
    """Signed areas and constant barycentric gradients per element."""
    v = mesh.nodes[mesh.elements[:, :3]]  # (n_el, 3, 2)
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # grad lambda_i, rows i=0..2: perpendicular of the opposite edge / det
    gl = np.empty((v.shape[0], 3, 2))
    gl[:, 0, 0] = v[:, 1, 1] - v[:, 2, 1]
    gl[:, 0, 1] = v[:, 2, 0] - v[:, 1, 0]
    gl[:, 1, 0] = v[:, 2, 1] - v[:, 0, 1]
    gl[:, 1, 1] = v[:, 0, 0] - v[:, 2, 0]
    gl[:, 2, 0] = v[:, 0, 1] - v[:, 1, 1]
    gl[:, 2, 1] = v[:, 1, 0] - v[:, 0, 0]
    gl /= det[:, None, None]
    return area, gl


def _p2_basis(l0, l1, l2):
    """P2 shape functions at barycentric coordinates (l0, l1, l2)."""
    return np.array(
        [
            l0 * (2 * l0 - 1),
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            4 * l0 * l1,
            4 * l1 * l2,
            4 * l2 * l0,
        ]
    )


def _assemble(mesh: Mesh, kind: str) -> sp.csr_matrix:
    area, gl = _vertex_geometry(mesh)
    n_el = mesh.n_elements

    if mesh.order == 1:
        if kind == "stiffness":
            # K_e[i,j] = area * grad(lambda_i) . grad(lambda_j)
            loc = np.einsum("eid,ejd->eij", gl, gl) * area[:, None, None]
        else:
            base = (np.ones((3, 3)) + np.eye(3)) / 12.0
            loc = base[None, :, :] * area[:, None, None]
        dof = mesh.elements
    else:
        nq = len(_QUAD_W)
        loc = np.zeros((n_el, 6, 6))
        for q in range(nq):
            l0, l1, l2 = _QUAD_BARY[q]
            w = _QUAD_W[q]
            if kind == "stiffness":
                # grad(phi) from barycentric chain rule
                coef = np.array(
                    [
                        [4 * l0 - 1, 0, 0],
                        [0, 4 * l1 - 1, 0],
                        [0, 0, 4 * l2 - 1],
                        [4 * l1, 4 * l0, 0],
                        [0, 4 * l2, 4 * l1],
                        [4 * l2, 0, 4 * l0],
                    ]
                )  # (6 basis, 3 barycentric)
                g = np.einsum("bk,ekd->ebd", coef, gl)
                loc += w * np.einsum("eid,ejd->eij", g, g)
            else:
                phi = _p2_basis(l0, l1, l2)
                loc += w * np.outer(phi, phi)[None, :, :]
        loc = loc * area[:, None, None]
        dof = mesh.elements

    nd = dof.shape[1]
    rows = np.repeat(dof, nd, axis=1).ravel()
    cols = np.tile(dof, (1, nd)).ravel()
    mat = sp.coo_matrix(
        (loc.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()
    mat.sum_duplicates()
    return mat


def assemble_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """Stiffness matrix K[i,j] = integral of grad(phi_i) . grad(phi_j)."""
    return _assemble(mesh, "stiffness")


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Mass matrix M[i,j] = integral of phi_i phi_j."""
    return _assemble(mesh, "mass")


def lumped_mass_weights(mesh: Mesh, mass: sp.csr_matrix | None = None) -> np.ndarray:
    """Positive nodal quadrature weights for the lumped L2 product.

    P1 uses row sums of the consistent mass matrix. P2 row sums vanish at
    vertices, so there the diagonal of M is rescaled per element to preserve
    the element area (HRZ lumping).
    """
    if mass is None:
        mass = assemble_mass(mesh)
    if mesh.order == 1:
        return np.asarray(mass.sum(axis=1)).ravel()
    area, _ = _vertex_geometry(mesh)
    # Element diagonal of the P2 mass matrix on the reference triangle.
    diag_ref = np.zeros(6)
    for q in range(len(_QUAD_W)):
        phi = _p2_basis(*_QUAD_BARY[q])
        diag_ref += _QUAD_W[q] * phi**2
    scale = 1.0 / diag_ref.sum()
    w = np.zeros(mesh.n_nodes)
    np.add.at(w, mesh.elements.ravel(),
              (area[:, None] * (diag_ref * scale)[None, :]).ravel())
    return w


def apply_dirichlet(matrix: sp.spmatrix, rhs: np.ndarray, mesh: Mesh):
    """Symmetric elimination of the homogeneous Dirichlet boundary.

    Rows and columns of boundary nodes are zeroed, their diagonal is set to
    one, and the boundary right-hand-side entries are set to zero. Applying
    the function twice is a no-op.
    """
    rhs = np.asarray(rhs, dtype=float)
    if matrix.shape[0] != mesh.n_nodes or rhs.shape[0] != mesh.n_nodes:
        raise ValueError(
            f"dimension mismatch: matrix {matrix.shape}, rhs {rhs.shape}, "
            f"mesh has {mesh.n_nodes} nodes"
        )
    interior = mesh.interior_mask().astype(float)
    boundary = 1.0 - interior
    S = sp.diags(interior)
    out = (S @ matrix @ S + sp.diags(boundary)).tocsr()
    out.sum_duplicates()
    return out, rhs * interior


def solve_sparse(
    matrix: sp.spmatrix,
    rhs: np.ndarray,
    rel_tol: float = 1e-8,
    x0: np.ndarray | None = None,
    max_iter: int | None = None,
) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients for SPD systems.

    Stops when ||A x - b||_2 <= rel_tol * ||b||_2. Raises SolverError with
    the achieved residual if the iteration cap (default 10n) is hit.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.shape[0]
    if matrix.shape != (n, n):
        raise ValueError(f"matrix {matrix.shape} does not match rhs length {n}")
    if max_iter is None:
        max_iter = 10 * n

    b_norm = np.linalg.norm(rhs)
    if b_norm == 0.0:
        return np.zeros(n)
    tol = rel_tol * b_norm

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = rhs - matrix @ x
    res = np.linalg.norm(r)
    if res <= tol:
        return x

    inv_diag = 1.0 / matrix.diagonal()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for _ in range(max_iter):
        Ap = matrix @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        if res <= tol:
            return x
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"CG did not reach rel_tol={rel_tol:g} within {max_iter} iterations "
        f"(||r||/||b|| = {res / b_norm:.3e})",
        achieved_residual=res / b_norm,
    )


def l2_inner(mass: sp.spmatrix, v, w) -> float:
    """L2(D) inner product of two nodal coefficient vectors."""
    va, wa = as_values(v), as_values(w)
    if va.shape[0] != mass.shape[0] or wa.shape[0] != mass.shape[0]:
        raise ValueError("dimension mismatch in l2_inner")
    return float(va @ (mass @ wa))


def l2_norm(mass: sp.spmatrix, v) -> float:
    return float(np.sqrt(max(l2_inner(mass, v, v), 0.0)))


def h1_norm(stiffness: sp.spmatrix, mass: sp.spmatrix, v) -> float:
    """Full H1 norm sqrt(||v||_L2^2 + ||grad v||_L2^2)."""
    va = as_values(v)
    return float(np.sqrt(max(va @ (mass @ va) + va @ (stiffness @ va), 0.0)))


def interpolate(mesh: Mesh, fn) -> FemFunction:
    """Nodal interpolant: coefficient at each node is fn(x1, x2)."""
    vals = np.array([fn(x, y) for x, y in mesh.nodes], dtype=float)
    return FemFunction(mesh, vals)


@dataclass(frozen=True)
class ElementQuadrature:
    """Degree-4 quadrature data for pointwise-data integrals.

    ``points`` are the global quadrature coordinates (n_el, nq, 2),
    ``weights`` the area-scaled weights (n_el, nq) and ``basis`` the local
    shape-function values (nq, n_local_dof). On P1 elements this rule
    agrees exactly with the consistent mass matrix, so quantities like
    integral((y - data)^2) assembled from it are true squares.
    """

    points: np.ndarray
    weights: np.ndarray
    basis: np.ndarray


def element_quadrature(mesh: Mesh) -> ElementQuadrature:
    verts = mesh.nodes[mesh.elements[:, :3]]
    area, _ = _vertex_geometry(mesh)
    points = np.einsum("qk,ekd->eqd", _QUAD_BARY, verts)
    weights = area[:, None] * _QUAD_W[None, :]
    if mesh.order == 1:
        basis = _QUAD_BARY.copy()
    else:
        basis = np.stack([_p2_basis(*b) for b in _QUAD_BARY])
    return ElementQuadrature(points=points, weights=weights, basis=basis)


def assemble_load(mesh: Mesh, quad: ElementQuadrature, values: np.ndarray) -> np.ndarray:
    """Nodal load vector integral(values * phi_i) from quadrature-point data.

    ``values`` has shape (n_el, nq), evaluated at ``quad.points``.
    """
    local = np.einsum("eq,qd->ed", quad.weights * values, quad.basis)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.elements.ravel(), local.ravel())
    return out


def integrate_quadrature(quad: ElementQuadrature, values: np.ndarray) -> float:
    """Integral of quadrature-point data over the domain."""
    return float(np.sum(quad.weights * values))


def export_field_csv(path, field: FemFunction) -> None:
    """Write `x1,x2,value` rows in row-major node order (atomic)."""
    mesh = field.mesh
    lines = ["x1,x2,value"]
    for (x, y), v in zip(mesh.nodes, field.values):
        lines.append(f"{x:.17g},{y:.17g},{v:.17g}")
    atomic_write(path, "\n".join(lines) + "\n")


def export_field_vtk(path, field: FemFunction, name: str = "field") -> None:
    """Legacy-VTK unstructured grid with linear triangle cells (atomic)."""
    mesh = field.mesh
    tri = mesh.elements[:, :3]
    out = [
        "# vtk DataFile Version 3.0",
        name,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_nodes} double",
    ]
    out.extend(f"{x:.17g} {y:.17g} 0.0" for x, y in mesh.nodes)
    out.append(f"CELLS {len(tri)} {4 * len(tri)}")
    out.extend(f"3 {a} {b} {c}" for a, b, c in tri)
    out.append(f"CELL_TYPES {len(tri)}")
    out.extend("5" for _ in range(len(tri)))
    out.append(f"POINT_DATA {mesh.n_nodes}")
    out.append(f"SCALARS {name} double 1")
    out.append("LOOKUP_TABLE default")
    out.extend(f"{v:.17g}" for v in field.values)
    atomic_write(path, "\n".join(out) + "\n")
