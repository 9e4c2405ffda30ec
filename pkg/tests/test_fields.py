import numpy as np
import pytest

from riskvi import fields
from riskvi.fields import (
    cosine_eigenpairs,
    evaluate_field,
    evaluate_field_at,
    export_samples_csv,
    import_samples_csv,
    lognormal_eigenpairs,
    sample_xi,
    transcendental_roots,
)


# ---------------------------------------------------------------- cosine

def brute_force_cosine_modes(m, jmax=20):
    """Enumeration oracle for the largest cosine eigenvalues."""
    entries = []
    for j in range(1, jmax + 1):
        for k in range(1, jmax + 1):
            entries.append((0.25 * np.exp(-np.pi / 4 * (j * j + k * k)), j, k))
    entries.sort(key=lambda t: (-t[0], t[1], t[2]))
    return entries[:m]


def test_cosine_top_modes_match_enumeration_oracle():
    exp = cosine_eigenpairs(20)
    oracle = brute_force_cosine_modes(20)
    assert np.allclose(exp.eigenvalues, [e[0] for e in oracle], rtol=1e-15)
    assert [tuple(mode) for mode in exp.modes] == [(j, k) for _, j, k in oracle]


def test_cosine_leading_eigenvalue():
    exp = cosine_eigenpairs(5)
    assert tuple(exp.modes[0]) == (1, 1)
    # value recomputed from the formula; the enumeration oracle agrees
    assert exp.eigenvalues[0] == pytest.approx(0.25 * np.exp(-np.pi / 2), rel=1e-15)
    assert exp.eigenvalues[0] == pytest.approx(0.0519699, abs=1e-7)


def test_cosine_tie_broken_lexicographically():
    exp = cosine_eigenpairs(3)
    assert tuple(exp.modes[1]) == (1, 2)
    assert tuple(exp.modes[2]) == (2, 1)
    assert exp.eigenvalues[1] == exp.eigenvalues[2]
    assert exp.eigenvalues[1] == pytest.approx(0.25 * np.exp(-5 * np.pi / 4), rel=1e-15)


@pytest.mark.parametrize("j,k", [(1, 1), (2, 3), (4, 1)])
def test_cosine_eigenfunction_normalized(j, k):
    # integral over the unit square of (2 cos(j pi x2) cos(k pi x1))^2 = 1
    n = 2000
    t = (np.arange(n) + 0.5) / n
    fx = (2 * np.cos(k * np.pi * t) ** 2).mean()
    fy = (np.cos(j * np.pi * t) ** 2).mean() * 2
    assert fx * fy == pytest.approx(1.0, abs=1e-6)


# ------------------------------------------------------- transcendental

def test_odd_family_first_root():
    w = transcendental_roots(3, "odd")
    # independent check: 1 - w tan(w/2) changes sign in (0, pi)
    assert 0 < w[0] < np.pi
    assert w[0] == pytest.approx(1.3065423742, abs=1e-9)
    for root in w:
        assert abs(1.0 - root * np.tan(root / 2.0)) < 1e-12


def test_even_family_first_root():
    w = transcendental_roots(3, "even")
    assert np.pi < w[0] < 3 * np.pi
    assert w[0] == pytest.approx(3.6731944063, abs=1e-9)
    assert np.tan(w[0] / 2.0) == pytest.approx(-w[0], rel=1e-10)
    for root in w[:2]:
        assert abs(np.tan(root / 2.0) + root) < 1e-12


@pytest.mark.parametrize("family", ["odd", "even"])
def test_roots_increasing_and_away_from_poles(family):
    roots = transcendental_roots(40, family)
    assert np.all(np.diff(roots) > 0)
    # tan singularities sit at odd multiples of pi
    nearest_pole = np.round((roots / np.pi - 1) / 2) * 2 * np.pi + np.pi
    assert np.all(np.abs(roots - nearest_pole) > 1e-6)


def test_roots_stable_residual_at_machine_precision():
    for family, stable in (
        ("odd", lambda w: np.cos(w / 2) - w * np.sin(w / 2)),
        ("even", lambda w: np.sin(w / 2) + w * np.cos(w / 2)),
    ):
        roots = transcendental_roots(50, family)
        assert np.max(np.abs(stable(roots))) < 1e-10


def test_roots_rejects_bad_input():
    with pytest.raises(ValueError):
        transcendental_roots(0, "odd")
    with pytest.raises(ValueError):
        transcendental_roots(3, "both")


# ------------------------------------------------------------ lognormal

def test_lognormal_leading_eigenvalue_from_root_oracle():
    exp = lognormal_eigenpairs(10)
    w1 = transcendental_roots(1, "odd")[0]
    lam_axis = 2.0 / (w1**2 + 1.0)
    assert lam_axis == pytest.approx(0.7388108, abs=1e-6)
    assert exp.eigenvalues[0] == pytest.approx(lam_axis**2, rel=1e-12)
    assert tuple(exp.modes[0]) == (1, 1)


def test_lognormal_eigenvalues_non_increasing():
    exp = lognormal_eigenpairs(100)
    assert np.all(np.diff(exp.eigenvalues) <= 0)
    assert exp.m == 100


def eigenfunction_1d(index, w, scale, t):
    if index % 2 == 1:
        return scale * np.cos(w * t)
    return scale * np.sin(w * t)


def test_lognormal_1d_eigenfunctions_unit_norm():
    # L2(0,1) norm after the shift t = x - 1/2, via 1e4-point trapezoid.
    exp = lognormal_eigenpairs(30)
    x = np.linspace(0.0, 1.0, 10_001)
    seen = set()
    for row in range(exp.m):
        for axis in range(2):
            idx = int(exp.modes[row, axis])
            if idx in seen:
                continue
            seen.add(idx)
            vals = eigenfunction_1d(
                idx, exp.axis_w[row, axis], exp.axis_scale[row, axis], x - 0.5
            )
            norm_sq = np.trapezoid(vals**2, x)
            assert norm_sq == pytest.approx(1.0, abs=1e-6)


# ------------------------------------------------------------- sampling

def test_sample_xi_deterministic():
    exp = cosine_eigenpairs(20)
    a = sample_xi(exp, 50, seed=123)
    b = sample_xi(exp, 50, seed=123)
    assert np.array_equal(a.samples, b.samples)
    c = sample_xi(exp, 50, seed=124)
    assert not np.array_equal(a.samples, c.samples)


def test_sample_xi_mean_zero_statistics():
    exp = cosine_eigenpairs(20)
    s = sample_xi(exp, 10_000, seed=5)
    assert np.all(np.abs(s.samples) <= 0.2)
    # CLT bound 3 * (0.4/sqrt(12)) / sqrt(n)
    bound = 3 * (0.4 / np.sqrt(12.0)) / np.sqrt(10_000)
    assert np.all(np.abs(s.samples.mean(axis=0)) < bound)


def test_sample_xi_lognormal_statistics():
    exp = lognormal_eigenpairs(8)
    s = sample_xi(exp, 10_000, seed=11)
    assert np.all(np.abs(s.samples) <= 100.0)
    stds = s.samples.std(axis=0)
    assert np.all(np.abs(stds - 3.0) < 0.15)


# ------------------------------------------------------------ evaluation

def test_evaluate_field_zero_coefficients():
    exp = cosine_eigenpairs(20)
    assert evaluate_field(exp, np.zeros(20), (0.25, 0.5)) == 0.0


def test_evaluate_field_lognormal_zero_coefficients():
    exp = lognormal_eigenpairs(100)
    assert evaluate_field(exp, np.zeros(100), (0.25, 0.25)) == pytest.approx(
        np.exp(-4.0), rel=1e-14
    )
    assert evaluate_field(exp, np.zeros(100), (0.75, 0.25)) == 0.0


def test_evaluate_field_outside_support():
    rng = np.random.default_rng(3)
    for exp in (cosine_eigenpairs(20), lognormal_eigenpairs(50)):
        xi = rng.normal(size=exp.m)
        assert evaluate_field(exp, xi, (0.75, 0.75)) == 0.0


def test_evaluate_field_rejects_wrong_length():
    exp = cosine_eigenpairs(20)
    with pytest.raises(ValueError):
        evaluate_field(exp, np.zeros(19), (0.2, 0.2))


def test_mean_zero_field_is_mean_zero_pointwise():
    exp = cosine_eigenpairs(20)
    s = sample_xi(exp, 10_000, seed=21)
    probes = np.array([[0.1, 0.3], [0.25, 0.5], [0.4, 0.9], [0.3, 0.2], [0.45, 0.7]])
    phi, _ = fields.field_matrix(exp, probes)
    vals = s.samples @ phi.T  # (n, probes)
    per_mode_var = (0.4**2) / 12.0
    se = np.sqrt(per_mode_var * (phi**2).sum(axis=1) / s.n)
    assert np.all(np.abs(vals.mean(axis=0)) <= 4 * se)


def test_mean_zero_field_amplitude_bound():
    exp = cosine_eigenpairs(20)
    bound = 0.2 * np.sum(np.sqrt(exp.eigenvalues) * 2.0)
    rng = np.random.default_rng(17)
    pts = rng.uniform(0, 1, size=(200, 2))
    for _ in range(20):
        xi = rng.uniform(-0.2, 0.2, exp.m)
        assert np.max(np.abs(evaluate_field_at(exp, xi, pts))) <= bound + 1e-12


@pytest.mark.parametrize("kind", ["mean_zero", "lognormal"])
def test_field_continuity_inside_support(kind):
    # Adjacent-sample differences on a fine probe grid are O(h) inside the
    # support (finite sums of smooth functions).
    if kind == "mean_zero":
        exp = cosine_eigenpairs(20)
        x1hi, x2hi = 0.5, 1.0
    else:
        exp = lognormal_eigenpairs(50)
        x1hi, x2hi = 0.5, 0.5
    rng = np.random.default_rng(9)
    xi = (
        rng.uniform(-0.2, 0.2, exp.m)
        if kind == "mean_zero"
        else rng.normal(0, 3, exp.m)
    )
    n = 256
    margin = 4.0 / n
    x = np.linspace(margin, x1hi - margin, n)
    y = np.linspace(margin, x2hi - margin, n)
    X, Y = np.meshgrid(x, y, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    vals = evaluate_field_at(exp, xi, pts).reshape(n, n)
    h = x[1] - x[0]
    max_jump = max(
        np.abs(np.diff(vals, axis=0)).max(), np.abs(np.diff(vals, axis=1)).max()
    )
    # Lipschitz bound of the series with |xi| factored in
    if kind == "mean_zero":
        grad_bound = np.sum(
            np.sqrt(exp.eigenvalues)
            * 2.0
            * np.pi
            * (exp.modes.sum(axis=1))
            * 0.2
        )
    else:
        series_amp = np.sum(
            np.sqrt(exp.eigenvalues)
            * np.abs(xi)
            * exp.axis_scale.prod(axis=1)
        )
        grad_bound = np.exp(-4.0 + series_amp) * np.sum(
            np.sqrt(exp.eigenvalues)
            * np.abs(xi)
            * exp.axis_scale.prod(axis=1)
            * exp.axis_w.max(axis=1)
        )
    assert max_jump <= np.sqrt(2.0) * grad_bound * h


def test_samples_csv_roundtrip(tmp_path):
    exp = cosine_eigenpairs(20)
    s = sample_xi(exp, 7, seed=42)
    path = tmp_path / "samples.csv"
    export_samples_csv(path, s)
    back = import_samples_csv(path)
    assert np.array_equal(back.samples, s.samples)
