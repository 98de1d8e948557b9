import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from impspec.baselines import BayesImpModel, plugin_estimator
from impspec.cbo import (
    BoTrace,
    build_prior,
    expected_improvement,
    get_task,
    gp_condition,
    run_cbo,
    task_points,
)
from impspec.gp import FittedModel, default_params
from impspec.kernels import KernelParams, SpectralMeasure, gram
from impspec.posterior import ate_curve, posterior_batch
from impspec.simulators import DgpSpec, simulate


# --- expected improvement --------------------------------------------------------


def test_ei_zero_spread_at_incumbent():
    assert expected_improvement(1.5, 0.0, 1.5) == 0.0


def test_ei_unit_spread_at_incumbent():
    assert expected_improvement(2.0, 1.0, 2.0) == pytest.approx(0.3989423, abs=1e-7)
    assert expected_improvement(2.0, 1.0, 2.0, "max") == pytest.approx(stats.norm.pdf(0))


def test_ei_zero_spread_is_clipped_improvement():
    np.testing.assert_allclose(expected_improvement([0.0, 2.0], [0.0, 0.0], 1.0), [1.0, 0.0])
    np.testing.assert_allclose(expected_improvement([0.0, 2.0], [0.0, 0.0], 1.0, "max"), [0.0, 1.0])


def test_ei_nonnegative_on_random_triples():
    rng = np.random.default_rng(0)
    m, best = rng.normal(scale=10, size=10_000), rng.normal(scale=10, size=10_000)
    s = np.abs(rng.normal(scale=3, size=10_000))
    s[::7] = 0.0
    for d in ("min", "max"):
        assert np.all(expected_improvement(m, s, best, d) >= 0)


@given(st.floats(-5, 5), st.floats(0.01, 5), st.floats(-5, 5))
def test_ei_matches_quadrature(m, s, best):
    # E[max(best - f, 0)] for f ~ N(m, s^2) by Gauss-Hermite quadrature
    x, w = np.polynomial.hermite_e.hermegauss(120)
    ref = np.sum(w * np.maximum(best - (m + s * x), 0.0)) / np.sqrt(2 * np.pi)
    assert expected_improvement(m, s, best) == pytest.approx(ref, abs=2e-3 * max(1.0, s))


def test_ei_rejects_negative_spread():
    with pytest.raises(ValueError):
        expected_improvement(0.0, -1.0, 0.0)


# --- surrogate priors --------------------------------------------------------------


def test_plain_prior_is_rbf():
    task = get_task("healthcare")
    pr = build_prior("plain", task=task)
    x = task.grid()[::20]
    assert np.all(pr.mean(x) == 0)
    np.testing.assert_array_equal(pr.cov(x), gram(x, x, pr.rbf))


def test_unknown_kind_and_missing_inputs():
    with pytest.raises(ValueError):
        build_prior("nope")
    with pytest.raises(ValueError):
        build_prior("impspec")


@pytest.fixture(scope="module")
def synthetic():
    task = get_task("synthetic-backdoor")
    data = simulate(task.spec(60, 1)).to_arrays()
    model = FittedModel(data, default_params(data))
    return task, model, SpectralMeasure.from_data(data.v1)


@pytest.fixture(scope="module")
def healthcare():
    task = get_task("healthcare")
    data = simulate(task.spec(60, 1)).to_arrays()
    model = FittedModel(data, default_params(data))
    return task, model, SpectralMeasure.from_data(np.vstack([data.v1, data.v2]))


def test_impspec_prior_variance_is_additive(synthetic):
    task, model, m = synthetic
    pr = build_prior("impspec", model, task, m)
    x = np.linspace(-4, 4, 9)
    W, Z = task_points(task, x)
    pm = posterior_batch(model, m, W, Z)
    np.testing.assert_allclose(pr.mean(x), pm.mean, atol=1e-10)
    np.testing.assert_allclose(np.diag(pr.cov(x)), pm.variance + pr.rbf.amplitude, rtol=1e-8, atol=1e-10)


def test_healthcare_impspec_prior_averages_covariates(healthcare):
    task, model, m = healthcare
    pr = build_prior("impspec", model, task, m)
    x = np.linspace(0, 1, 5)
    mean, C = pr.method_moments(x)
    ref = ate_curve(model, m, x, [0], model.data.z2[:, 1:])
    np.testing.assert_allclose(mean, ref.mean, atol=1e-10)
    np.testing.assert_allclose(np.diag(C), ref.variance, rtol=1e-6, atol=1e-10)


@pytest.mark.parametrize("kind", ["impspec", "bayesimp", "cbo_plugin", "plain"])
def test_prior_covariance_symmetric_psd(kind, synthetic):
    task, model, m = synthetic
    arg = model
    if kind == "bayesimp":
        arg = BayesImpModel(model.data, model.params, m, SpectralMeasure.from_data(model.data.w1))
    pr = build_prior(kind, arg, task, m)
    x = task.grid()[::10]
    C = pr.cov(x)
    np.testing.assert_allclose(C, C.T, atol=1e-10)
    assert np.linalg.eigvalsh(C + 1e-6 * np.eye(x.size)).min() > 0


def test_plugin_prior_moments(synthetic):
    task, model, m = synthetic
    pr = build_prior("cbo_plugin", model, task)
    x = np.linspace(-4, 4, 7)
    W, Z = task_points(task, x)
    mean, C = pr.method_moments(x)
    d = model.data
    m1 = plugin_estimator(d, model.params, None, W, Z)
    m2 = plugin_estimator(d, model.params, None, W, Z, y=d.y1**2)
    np.testing.assert_allclose(mean, m1, atol=1e-9)
    np.testing.assert_allclose(np.diag(C), np.maximum(m2 - m1**2, 0), atol=1e-8)
    assert np.all(np.diag(C) >= 0)
    assert all(k > 0 for k in pr.clamp_events)


# --- conditioning and the BO loop --------------------------------------------------


def test_zero_observations_leave_prior_unchanged():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(6, 6))
    K, mean = A @ A.T, rng.normal(size=6)
    mu, var = gp_condition(mean, K, [], [])
    np.testing.assert_array_equal(mu, mean)
    np.testing.assert_array_equal(var, np.diag(K))


def test_repeated_point_adds_no_information():
    x = np.linspace(0, 1, 30)
    K = gram(x, x, KernelParams([0.2], 1.0))
    mean = np.zeros(30)
    a = gp_condition(mean, K, [4, 17], [0.3, -0.2])
    b = gp_condition(mean, K, [4, 17, 17], [0.3, -0.2, -0.2])
    np.testing.assert_allclose(a[0], b[0], atol=1e-6)
    np.testing.assert_allclose(a[1], b[1], atol=1e-6)


def test_conditioning_interpolates_noise_free():
    x = np.linspace(0, 1, 30)
    K = gram(x, x, KernelParams([0.2], 1.0))
    mu, var = gp_condition(np.zeros(30), K, [3, 20], [1.0, -1.0])
    assert mu[3] == pytest.approx(1.0, abs=1e-4) and mu[20] == pytest.approx(-1.0, abs=1e-4)
    assert var[3] < 1e-5


def test_constant_oracle_has_zero_regret():
    grid = np.linspace(0, 1, 50)
    tr = run_cbo(build_prior("plain"), lambda g: np.full_like(g, 2.5), grid, iters=6, seed=3)
    assert tr.regret == [0.0] * 6


def test_first_query_at_optimum_gives_zero_regret():
    # a prior whose mean already points at the optimum: EI peaks there
    grid = np.linspace(0, 1, 101)
    truth = (grid - 0.7) ** 2
    pr = build_prior("plain")
    pr.method = lambda x: ((x - 0.7) ** 2, np.zeros((x.size, x.size)))
    tr = run_cbo(pr, truth, grid, iters=5)
    assert tr.x[0] == pytest.approx(0.7)
    assert tr.cumulative_regret == 0.0


@pytest.mark.parametrize("direction", ["min", "max"])
def test_trace_invariants(direction):
    grid = np.linspace(-2, 2, 80)
    truth = np.sin(3 * grid) + 0.3 * grid
    tr = run_cbo(build_prior("plain", task=None), truth, grid, iters=10, refit_every=3, seed=4, direction=direction)
    best = np.asarray(tr.best)
    assert np.all(np.diff(best) <= 0) if direction == "min" else np.all(np.diff(best) >= 0)
    assert np.all(np.asarray(tr.regret) >= 0)
    assert len(tr.rbf_history) == 4
    assert tr.f_star == (truth.min() if direction == "min" else truth.max())


def test_seeded_runs_bit_identical():
    grid = np.linspace(0, 1, 60)
    truth = np.cos(5 * grid)
    a = run_cbo(build_prior("plain"), truth, grid, iters=8, seed=11)
    b = run_cbo(build_prior("plain"), truth, grid, iters=8, seed=11)
    assert a.x == b.x and a.y == b.y


def test_trace_csv_resume(tmp_path):
    grid = np.linspace(0, 1, 60)
    truth = np.cos(5 * grid)
    full = run_cbo(build_prior("plain"), truth, grid, iters=8, refit_every=0, seed=2)
    part = run_cbo(build_prior("plain"), truth, grid, iters=4, refit_every=0, seed=2)
    part.to_csv(tmp_path / "t.csv")
    back = BoTrace.from_csv(tmp_path / "t.csv", "min", part.f_star, part.x_star, grid)
    assert back.y == part.y and back.best == part.best
    resumed = run_cbo(build_prior("plain"), truth, grid, iters=8, refit_every=0, seed=2, resume=back)
    assert resumed.x == full.x
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "iteration,x,y,best,regret"


def test_run_cbo_input_errors():
    grid = np.linspace(0, 1, 5)
    with pytest.raises(ValueError):
        run_cbo(build_prior("plain"), np.zeros(5), grid, iters=0)
    with pytest.raises(ValueError):
        run_cbo(build_prior("plain"), np.zeros(4), grid)
    with pytest.raises(ValueError):
        run_cbo(build_prior("plain"), np.zeros(5), grid, direction="up")


def test_task_registry():
    assert get_task("healthcare-cbo") is get_task("healthcare")
    assert get_task("synthetic-frontdoor").n == 500
    assert get_task("healthcare").grid().size == 200
    with pytest.raises(ValueError):
        get_task("missing")
