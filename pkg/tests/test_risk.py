import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from riskvi.mesh import assemble_mass, build_mesh
from riskvi.risk import Control, RiskParams, cvar_exact, saa_objective, v_eps, v_eps_prime

BETAS = [0.0, 0.5, 0.95]


def test_risk_params_validation():
    with pytest.raises(ValueError):
        RiskParams(beta=1.0)
    with pytest.raises(ValueError):
        RiskParams(beta=-0.1)
    with pytest.raises(ValueError):
        RiskParams(beta=0.5, epsilon=0.0)


@pytest.mark.parametrize("beta", BETAS)
def test_v_eps_continuity_at_breakpoints(beta):
    params = RiskParams(beta=beta, epsilon=0.05)
    eps = params.epsilon
    # left breakpoint: both branches give -eps/2
    assert v_eps(-eps, params) == pytest.approx(-eps / 2.0, abs=1e-15)
    assert v_eps(-eps + 1e-12, params) == pytest.approx(-eps / 2.0, abs=1e-11)
    # right breakpoint: algebraic identity eps*beta*(2-beta)/(2(1-beta)^2)
    hi = params.upper_break
    expected = eps * beta * (2.0 - beta) / (2.0 * (1.0 - beta) ** 2)
    assert v_eps(hi, params) == pytest.approx(expected, rel=1e-12)
    # approaching from the quadratic side; slope is 1/(1-beta)
    assert v_eps(hi - 1e-13, params) == pytest.approx(expected, abs=1e-12 / (1 - beta))
    assert v_eps_prime(hi, params) == pytest.approx(1.0 / (1.0 - beta), rel=1e-12)


@pytest.mark.parametrize("beta", BETAS)
def test_v_eps_prime_at_zero(beta):
    params = RiskParams(beta=beta, epsilon=0.05)
    assert v_eps_prime(0.0, params) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("beta", BETAS)
def test_v_eps_is_c1_by_central_differences(beta):
    params = RiskParams(beta=beta, epsilon=0.05)
    s = np.linspace(-0.2, 0.3, 1000)
    step = 1e-7
    fd = (v_eps(s + step, params) - v_eps(s - step, params)) / (2 * step)
    assert np.max(np.abs(fd - v_eps_prime(s, params))) < 1e-5


@pytest.mark.parametrize("beta", BETAS)
def test_v_eps_convex_nondecreasing(beta):
    params = RiskParams(beta=beta, epsilon=0.05)
    s = np.linspace(-0.5, 0.5, 4001)
    d = v_eps_prime(s, params)
    assert np.all(d >= 0.0)
    assert np.all(np.diff(d) >= -1e-14)


@pytest.fixture(scope="module")
def mass():
    mesh = build_mesh(4, 4)
    return mesh, assemble_mass(mesh)


def test_saa_objective_single_sample(mass):
    mesh, M = mass
    params = RiskParams(beta=0.5, epsilon=0.05)
    control = Control(np.zeros(mesh.n_nodes), s=0.7)
    # one misfit equal to s: objective = s + v(0) = s
    assert saa_objective(control, [0.7], params, M) == pytest.approx(0.7, abs=1e-15)


def test_saa_objective_risk_neutral_mean(mass):
    mesh, M = mass
    params = RiskParams(beta=0.0, epsilon=0.05)
    # at beta = 0, v(t) = t for t >= 0, so any s below every misfit gives
    # the plain sample mean plus the control cost
    misfits = np.array([0.4, 0.9, 1.3])
    z = np.full(mesh.n_nodes, 2.0)
    control = Control(z, s=0.3)
    cost = 0.5 * float(z @ (M @ z))
    assert saa_objective(control, misfits, params, M) == pytest.approx(
        misfits.mean() + cost, rel=1e-14
    )


def test_saa_objective_frozen_example(mass):
    # n=2, misfits {0,1}, s=0, beta=0.95, eps=0.05, z=0:
    # v(0) = 0 and v(1) = 20 (1 - 0.45125) = 10.975, mean 5.4875
    # (recomputed from the closed-form branch).
    mesh, M = mass
    params = RiskParams(beta=0.95, epsilon=0.05)
    control = Control(np.zeros(mesh.n_nodes), s=0.0)
    assert v_eps(1.0, params) == pytest.approx(10.975, rel=1e-12)
    assert saa_objective(control, [0.0, 1.0], params, M) == pytest.approx(
        5.4875, rel=1e-12
    )


def test_saa_objective_rejects_empty(mass):
    mesh, M = mass
    with pytest.raises(ValueError):
        saa_objective(Control(np.zeros(mesh.n_nodes), 0.0), [], RiskParams(), M)


def test_cvar_exact_mean_at_beta_zero():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=200)
    assert cvar_exact(xs, 0.0) == pytest.approx(xs.mean(), rel=1e-14)


def brute_force_cvar(values, beta, grid=20001):
    values = np.asarray(values, dtype=float)
    lo, hi = values.min() - 1.0, values.max() + 1.0
    s = np.linspace(lo, hi, grid)
    obj = s + np.mean(np.maximum(values[None, :] - s[:, None], 0.0), axis=1) / (1 - beta)
    return obj.min()


def test_cvar_exact_small_example_against_grid_oracle():
    values = [1.0, 2.0, 3.0, 4.0]
    assert cvar_exact(values, 0.75) == pytest.approx(4.0, abs=1e-12)
    assert cvar_exact(values, 0.75) == pytest.approx(
        brute_force_cvar(values, 0.75), abs=1e-3
    )


def test_cvar_exact_constant_distribution():
    for beta in BETAS:
        assert cvar_exact([2.5] * 10, beta) == pytest.approx(2.5, abs=1e-14)


def test_cvar_exact_matches_grid_oracle_random():
    rng = np.random.default_rng(42)
    xs = rng.normal(size=60)
    for beta in (0.3, 0.75, 0.9):
        assert cvar_exact(xs, beta) == pytest.approx(
            brute_force_cvar(xs, beta), abs=2e-3
        )


def smoothed_risk_minimum(values, params):
    """min over s of s + mean(v_eps(x - s)) via presearch + refinement."""
    values = np.asarray(values, dtype=float)
    fn = lambda s: s + float(np.mean(v_eps(values - s, params)))
    grid = np.linspace(values.min() - 1.0, values.max() + 1.0, 512)
    s0 = grid[np.argmin([fn(s) for s in grid])]
    width = grid[1] - grid[0]
    res = minimize_scalar(fn, bounds=(s0 - 2 * width, s0 + 2 * width), method="bounded",
                          options={"xatol": 1e-10})
    return min(fn(res.x), fn(s0))


@pytest.mark.parametrize("beta", BETAS)
def test_smoothing_error_bound(beta):
    # |min_s smoothed - empirical CVaR| <= eps * max(1/2, beta^2/(2(1-beta)))
    params = RiskParams(beta=beta, epsilon=0.05)
    bound = params.epsilon * max(0.5, beta**2 / (2.0 * (1.0 - beta)))
    rng = np.random.default_rng(100 + int(beta * 100))
    for _ in range(5):
        xs = rng.normal(loc=1.0, scale=0.5, size=100)
        gap = abs(smoothed_risk_minimum(xs, params) - cvar_exact(xs, beta))
        assert gap <= bound + 1e-9
