import numpy as np
import pytest
import sympy

from riskvi import benchmark
from riskvi.benchmark import (
    build_instance,
    build_rhs,
    build_target,
    lap_y_hat,
    y_hat,
    zeta_hat,
)


@pytest.fixture(scope="module")
def symbolic_oracle():
    """Sympy reference for the bump state and its Laplacian on (0,1/2)^2."""
    x1, x2 = sympy.symbols("x1 x2")
    g = lambda t: t**3 - t**2 + sympy.Rational(1, 4) * t
    expr = 160 * g(x1) * g(x2)
    lap = sympy.diff(expr, x1, 2) + sympy.diff(expr, x2, 2)
    return (
        sympy.lambdify((x1, x2), expr, "numpy"),
        sympy.lambdify((x1, x2), lap, "numpy"),
    )


def test_y_hat_values(symbolic_oracle):
    y_sym, _ = symbolic_oracle
    assert y_hat(0.25, 0.25) == pytest.approx(0.0390625, abs=1e-15)
    assert y_hat(0.25, 0.25) == pytest.approx(float(y_sym(0.25, 0.25)), abs=1e-14)
    assert y_hat(0.75, 0.25) == 0.0
    assert y_hat(0.5, 0.25) == 0.0  # support is open
    rng = np.random.default_rng(1)
    pts = rng.uniform(0.01, 0.49, size=(50, 2))
    assert np.allclose(
        y_hat(pts[:, 0], pts[:, 1]), y_sym(pts[:, 0], pts[:, 1]), atol=1e-13
    )


def test_zeta_hat_values():
    assert zeta_hat(0.8, 0.375) == pytest.approx(0.5, abs=1e-15)
    assert zeta_hat(0.1, 0.1) == 0.0
    assert np.all(zeta_hat(np.linspace(0, 1, 101), 0.5) >= 0.0)


def test_lap_y_hat_against_symbolic_oracle(symbolic_oracle):
    _, lap_sym = symbolic_oracle
    assert lap_y_hat(0.25, 0.25) == pytest.approx(-2.5, abs=1e-13)
    assert lap_y_hat(0.25, 0.25) == pytest.approx(float(lap_sym(0.25, 0.25)), abs=1e-13)
    assert lap_y_hat(0.6, 0.6) == 0.0
    rng = np.random.default_rng(2)
    pts = rng.uniform(0.01, 0.49, size=(50, 2))
    assert np.allclose(
        lap_y_hat(pts[:, 0], pts[:, 1]), lap_sym(pts[:, 0], pts[:, 1]), atol=1e-12
    )


def test_lap_y_hat_against_stencil_oracle():
    # 5-point finite-difference Laplacian of the exact bump, interior of
    # the support, step h: agreement within O(h^2).
    h = 1e-3
    rng = np.random.default_rng(3)
    pts = rng.uniform(0.05, 0.45, size=(30, 2))
    for x, y in pts:
        stencil = (
            y_hat(x + h, y) + y_hat(x - h, y) + y_hat(x, y + h) + y_hat(x, y - h)
            - 4 * y_hat(x, y)
        ) / h**2
        assert stencil == pytest.approx(lap_y_hat(x, y), abs=200 * h**2)


@pytest.fixture(scope="module")
def instance():
    return build_instance(16, 16, noise="mean_zero", beta=0.0)


def test_instance_nodal_invariants(instance):
    assert np.all(instance.y_hat.values >= 0.0)
    assert np.all(instance.zeta_hat.values >= 0.0)
    identity = (
        instance.y_hat.values
        + instance.zeta_hat.values
        - instance.lap_y_hat.values
    )
    assert np.array_equal(instance.y_d.values, identity)


def test_build_rhs_zero_noise(instance):
    f = build_rhs(instance, np.zeros(instance.expansion.m))
    expected = -(
        instance.lap_y_hat.values
        + instance.y_hat.values
        + instance.zeta_hat.values
    )
    assert np.array_equal(f.values, expected)


def test_build_rhs_outside_all_supports(instance):
    rng = np.random.default_rng(5)
    xi = rng.uniform(-0.2, 0.2, instance.expansion.m)
    f = build_rhs(instance, xi)
    node = np.flatnonzero(
        (instance.mesh.nodes[:, 0] == 0.875) & (instance.mesh.nodes[:, 1] == 0.875)
    )[0]
    x, y = instance.mesh.nodes[node]
    assert f.values[node] == pytest.approx(-zeta_hat(x, y), abs=1e-14)


def test_build_rhs_at_quarter_point(instance):
    f = build_rhs(instance, np.zeros(instance.expansion.m))
    node = np.flatnonzero(
        (instance.mesh.nodes[:, 0] == 0.25) & (instance.mesh.nodes[:, 1] == 0.25)
    )[0]
    assert f.values[node] == pytest.approx(2.5 - 0.0390625 - zeta_hat(0.25, 0.25),
                                           abs=1e-13)


def test_build_target_values(instance):
    yd = build_target(instance)
    node = np.flatnonzero(
        (instance.mesh.nodes[:, 0] == 0.25) & (instance.mesh.nodes[:, 1] == 0.25)
    )[0]
    assert yd.values[node] == pytest.approx(0.0390625 + 0.0 + 2.5, abs=1e-13)
    outside = (instance.mesh.nodes[:, 0] >= 0.5) | (instance.mesh.nodes[:, 1] >= 0.5)
    zh = instance.zeta_hat.values
    assert np.allclose(yd.values[outside], zh[outside], atol=1e-14)


def test_biactive_set_has_positive_area():
    # {y_hat = 0} and {zeta_hat > 0} overlap on a set of positive area
    # (the lack of strict complementarity the instance is built for).
    n = 512
    t = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(t, t, indexing="ij")
    cell = 1.0 / n**2
    area = np.sum((y_hat(X, Y) == 0.0) & (zeta_hat(X, Y) > 0.0)) * cell
    assert area > 0.05


def test_quadrature_misfit_consistency(instance):
    # The quadrature tracking functional is a true square: nonnegative and
    # zero only at the L2 projection of the target.
    rng = np.random.default_rng(11)
    for _ in range(5):
        v = rng.normal(size=instance.n_nodes)
        assert instance.misfit(v) >= 0.0
    import scipy.sparse.linalg as spla

    proj = spla.spsolve(instance.mass.tocsc(), instance.target_load)
    resid = instance.tracking_residual(proj)
    assert np.max(np.abs(resid)) < 1e-10
    # misfit at the projection equals the best-approximation deficit
    deficit = instance.misfit(proj)
    assert 0.0 <= deficit < instance.misfit(instance.y_d.values)


def test_field_load_matches_quadrature_of_nodal_modes(instance):
    # For the linear (mean-zero) model the per-mode load matrix reproduces
    # assembling the field realization directly.
    rng = np.random.default_rng(13)
    xi = rng.uniform(-0.2, 0.2, instance.expansion.m)
    direct = instance.field_load(xi)
    from riskvi import fields, mesh as fem

    qp = instance.quad
    series, mask = fields.field_matrix(
        instance.expansion, qp.points.reshape(-1, 2)
    )
    b_qp = (series @ xi).reshape(qp.weights.shape)
    assembled = fem.assemble_load(instance.mesh, qp, b_qp)
    assert np.allclose(direct, assembled, atol=1e-15)


def test_lognormal_instance_field_load():
    inst = build_instance(8, 8, noise="lognormal", kl_terms=30)
    rng = np.random.default_rng(17)
    xi = rng.normal(0, 3, 30)
    load = inst.field_load(xi)
    # compare against per-point quadrature assembly done by hand
    from riskvi import fields, mesh as fem

    series, mask = fields.field_matrix(inst.expansion, inst.quad.points.reshape(-1, 2))
    b_qp = np.where(mask, np.exp(-4.0 + series @ xi), 0.0).reshape(inst.quad.weights.shape)
    assert np.allclose(load, fem.assemble_load(inst.mesh, inst.quad, b_qp), atol=1e-15)
    # b vanishes outside (0, 1/2)^2, so the load is supported near it
    far = (inst.mesh.nodes[:, 0] > 0.6) & (inst.mesh.nodes[:, 1] > 0.6)
    assert np.all(load[far] == 0.0)
