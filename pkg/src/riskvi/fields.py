"""Karhunen-Loeve noise models for the random right-hand side.

Two truncated expansions are provided: a mean-zero cosine field supported
on (0,1/2)x(0,1) with uniform coefficients, and a lognormal field supported
on (0,1/2)^2 whose 1D eigenpairs come from transcendental root equations
and whose coefficients are truncated Gaussians. Reference formulas live on
(-1/2,1/2)^2; the lognormal eigenfunctions are evaluated after the shift
x -> x - (1/2,1/2), while the cosine family is stated directly in domain
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._util import atomic_write, fmt

__all__ = [
    "KlExpansion",
    "SampleSet",
    "cosine_eigenpairs",
    "transcendental_roots",
    "lognormal_eigenpairs",
    "sample_xi",
    "evaluate_field",
    "evaluate_field_at",
    "field_matrix",
    "export_samples_csv",
    "import_samples_csv",
]

MEAN_ZERO = "mean_zero"
LOGNORMAL = "lognormal"

UNIFORM_HALF_WIDTH = 0.2     # xi ~ U(-0.2, 0.2) for the cosine model
TRUNC_NORMAL_STD = 3.0       # xi ~ N(0, 3) truncated to +-100
TRUNC_NORMAL_BOUND = 100.0
LOGNORMAL_SHIFT = -4.0


@dataclass(frozen=True)
class KlExpansion:
    """Truncated KL expansion of one noise model.

    ``modes`` holds one integer pair per retained term: (j, k) cosine mode
    numbers for the mean-zero family, or the 1D eigenpair indices (i, k)
    per axis for the lognormal family. For the lognormal family ``axis_w``
    and ``axis_scale`` carry the per-axis frequencies and L2 normalization
    constants of each term.
    """

    kind: str
    m: int
    eigenvalues: np.ndarray
    modes: np.ndarray
    support: tuple[float, float, float, float]  # (x1min, x1max, x2min, x2max)
    shift: float
    axis_w: np.ndarray | None = None
    axis_scale: np.ndarray | None = None


@dataclass(frozen=True)
class SampleSet:
    """Seeded i.i.d. coefficient vectors for one expansion."""

    seed: int
    distribution: str
    samples: np.ndarray

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def m(self) -> int:
        return self.samples.shape[1]


def cosine_eigenpairs(m: int) -> KlExpansion:
    """The m largest modes of the mean-zero cosine expansion.

    Eigenvalues are (1/4) exp(-pi/4 (j^2+k^2)) for mode numbers j,k >= 1,
    sorted descending with lexicographic (j, k) tie-breaking.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    jmax = max(8, int(np.ceil(np.sqrt(m))) + 6)
    modes = [(j, k) for j in range(1, jmax + 1) for k in range(1, jmax + 1)]
    lam = np.array([0.25 * np.exp(-np.pi / 4.0 * (j * j + k * k)) for j, k in modes])
    order = sorted(range(len(modes)), key=lambda i: (-lam[i], modes[i]))
    keep = order[:m]
    return KlExpansion(
        kind=MEAN_ZERO,
        m=m,
        eigenvalues=lam[keep],
        modes=np.array([modes[i] for i in keep], dtype=np.int64),
        support=(0.0, 0.5, 0.0, 1.0),
        shift=0.0,
    )


def _bisect(fn, lo: float, hi: float):
    flo, fhi = fn(lo), fn(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise RuntimeError(f"bracket failure on [{lo}, {hi}]: f={flo:g},{fhi:g}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        fm = fn(mid)
        if fm == 0.0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi, fhi = mid, fm
    return 0.5 * (lo + hi)


def transcendental_roots(count: int, family: str) -> np.ndarray:
    """First positive roots of the lognormal 1D eigenvalue equations.

    family="odd":  roots of 1 - w tan(w/2), one per branch of tan;
    family="even": roots of tan(w/2) + w.

    Bisection runs on the singularity-free equivalents
    cos(w/2) - w sin(w/2) and sin(w/2) + w cos(w/2), which share the roots
    but stay bounded across the tan poles, so every bracket is one full
    branch and the iteration converges to machine precision.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    roots = np.empty(count)
    if family == "odd":
        fn = lambda w: np.cos(w / 2.0) - w * np.sin(w / 2.0)
        for j in range(1, count + 1):
            lo = (2 * j - 2) * np.pi if j > 1 else 1e-12
            hi = (2 * j - 1) * np.pi - 1e-12
            roots[j - 1] = _bisect(fn, lo, hi)
    elif family == "even":
        fn = lambda w: np.sin(w / 2.0) + w * np.cos(w / 2.0)
        for j in range(1, count + 1):
            lo = (2 * j - 1) * np.pi + 1e-12
            hi = 2 * j * np.pi
            roots[j - 1] = _bisect(fn, lo, hi)
    else:
        raise ValueError(f"unknown family {family!r}")
    return roots


def _axis_eigens(n1d: int):
    """1D lognormal eigenpairs: frequency, eigenvalue, normalization."""
    n_odd = (n1d + 1) // 2
    n_even = n1d // 2
    w_hat = transcendental_roots(n_odd, "odd")
    w_til = transcendental_roots(max(n_even, 1), "even")
    w = np.empty(n1d)
    w[0::2] = w_hat[:n_odd]
    if n_even:
        w[1::2] = w_til[:n_even]
    lam = 2.0 / (w**2 + 1.0)
    sin_term = np.sin(w) / (2.0 * w)
    scale = np.empty(n1d)
    scale[0::2] = 1.0 / np.sqrt(0.5 + sin_term[0::2])
    scale[1::2] = 1.0 / np.sqrt(0.5 - sin_term[1::2])
    return w, lam, scale


def lognormal_eigenpairs(m: int) -> KlExpansion:
    """The m largest tensor-product eigenpairs of the lognormal field.

    Per axis, w_i alternates between the odd-family and even-family roots
    and lambda_i = 2/(w_i^2+1); 2D eigenvalues are products of the 1D ones,
    sorted descending with lexicographic (i, k) tie-breaking.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    n1d = max(4, m)
    w, lam1d, scale = _axis_eigens(n1d)
    pairs = [(i, k) for i in range(1, n1d + 1) for k in range(1, n1d + 1)]
    lam2d = np.array([lam1d[i - 1] * lam1d[k - 1] for i, k in pairs])
    order = sorted(range(len(pairs)), key=lambda t: (-lam2d[t], pairs[t]))
    keep = order[:m]
    modes = np.array([pairs[t] for t in keep], dtype=np.int64)
    axis_w = np.column_stack([w[modes[:, 0] - 1], w[modes[:, 1] - 1]])
    axis_scale = np.column_stack([scale[modes[:, 0] - 1], scale[modes[:, 1] - 1]])
    return KlExpansion(
        kind=LOGNORMAL,
        m=m,
        eigenvalues=lam2d[keep],
        modes=modes,
        support=(0.0, 0.5, 0.0, 0.5),
        shift=LOGNORMAL_SHIFT,
        axis_w=axis_w,
        axis_scale=axis_scale,
    )


def sample_xi(expansion: KlExpansion, n: int, seed: int) -> SampleSet:
    """Draw n i.i.d. coefficient vectors with a fixed generation order.

    Samples are drawn sequentially and components within a sample
    sequentially from a single numpy PCG64 stream, so a given seed always
    produces the same set regardless of later parallel use. Lognormal
    coefficients are N(0,3) with out-of-range draws (|xi| > 100, a ~33
    sigma event) rejected and redrawn.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if expansion.kind == MEAN_ZERO:
        xs = rng.uniform(-UNIFORM_HALF_WIDTH, UNIFORM_HALF_WIDTH, size=(n, expansion.m))
        dist = f"uniform(-{UNIFORM_HALF_WIDTH}, {UNIFORM_HALF_WIDTH})"
    else:
        xs = rng.normal(0.0, TRUNC_NORMAL_STD, size=(n, expansion.m))
        while True:
            bad = np.abs(xs) > TRUNC_NORMAL_BOUND
            n_bad = int(bad.sum())
            if n_bad == 0:
                break
            xs[bad] = rng.normal(0.0, TRUNC_NORMAL_STD, size=n_bad)
        dist = (
            f"normal(0, {TRUNC_NORMAL_STD}) truncated to "
            f"[-{TRUNC_NORMAL_BOUND}, {TRUNC_NORMAL_BOUND}]"
        )
    return SampleSet(seed=seed, distribution=dist, samples=xs)


def field_matrix(expansion: KlExpansion, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-point mode matrix sqrt(lambda_i) phi_i(x) and the support mask.

    Rows outside the support rectangle are zero. The lognormal
    eigenfunctions are evaluated at x - (1/2, 1/2).
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    x1, x2 = coords[:, 0], coords[:, 1]
    x1min, x1max, x2min, x2max = expansion.support
    mask = (x1 > x1min) & (x1 < x1max) & (x2 > x2min) & (x2 < x2max)
    sqrt_lam = np.sqrt(expansion.eigenvalues)

    if expansion.kind == MEAN_ZERO:
        j = expansion.modes[:, 0][None, :]
        k = expansion.modes[:, 1][None, :]
        phi = 2.0 * np.cos(j * np.pi * x2[:, None]) * np.cos(k * np.pi * x1[:, None])
    else:
        t1 = (x1 - 0.5)[:, None]
        t2 = (x2 - 0.5)[:, None]
        odd1 = expansion.modes[:, 0] % 2 == 1
        odd2 = expansion.modes[:, 1] % 2 == 1
        w1 = expansion.axis_w[:, 0][None, :]
        w2 = expansion.axis_w[:, 1][None, :]
        f1 = np.where(odd1[None, :], np.cos(w1 * t1), np.sin(w1 * t1))
        f2 = np.where(odd2[None, :], np.cos(w2 * t2), np.sin(w2 * t2))
        phi = (expansion.axis_scale[:, 0] * expansion.axis_scale[:, 1])[None, :] * f1 * f2
    return sqrt_lam[None, :] * phi * mask[:, None], mask


def evaluate_field_at(expansion: KlExpansion, xi: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Vectorized field evaluation b(x, xi) at many points."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (expansion.m,):
        raise ValueError(f"xi has shape {xi.shape}, expected ({expansion.m},)")
    phi, mask = field_matrix(expansion, coords)
    series = phi @ xi
    if expansion.kind == MEAN_ZERO:
        return series
    return np.where(mask, np.exp(expansion.shift + series), 0.0)


def evaluate_field(expansion: KlExpansion, xi: np.ndarray, x) -> float:
    """Field value b(x, xi) at a single point of the closed unit square."""
    return float(evaluate_field_at(expansion, xi, np.asarray(x, dtype=float)[None, :])[0])


def export_samples_csv(path, samples: SampleSet) -> None:
    """Write `sample_index,component_index,value` rows (atomic)."""
    lines = ["sample_index,component_index,value"]
    for i in range(samples.n):
        for j in range(samples.m):
            lines.append(f"{i},{j},{fmt(samples.samples[i, j])}")
    atomic_write(path, "\n".join(lines) + "\n")


def import_samples_csv(path, seed: int = -1, distribution: str = "imported") -> SampleSet:
    """Read a sample set written by export_samples_csv."""
    triples = []
    with open(path) as handle:
        header = handle.readline().strip()
        if header != "sample_index,component_index,value":
            raise ValueError(f"unexpected header {header!r}")
        for line in handle:
            i, j, v = line.strip().split(",")
            triples.append((int(i), int(j), float(v)))
    n = max(t[0] for t in triples) + 1
    m = max(t[1] for t in triples) + 1
    xs = np.zeros((n, m))
    for i, j, v in triples:
        xs[i, j] = v
    return SampleSet(seed=seed, distribution=distribution, samples=xs)
