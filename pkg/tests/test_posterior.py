import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.polynomial.hermite_e import hermegauss

from impspec.baselines import plugin_estimator
from impspec.gp import FittedModel, ModelParams, TwoStageData
from impspec.kernels import KernelParams, SpectralMeasure, gram
from impspec.posterior import (
    CausalQuery,
    ate_curve,
    ate_moments,
    credible_interval,
    incremental_moments,
    posterior_batch,
    posterior_cov,
    posterior_cross_cov,
    posterior_moments,
)

from conftest import make_data, make_model, make_params


def ktilde_quadrature(V, p: KernelParams, m: SpectralMeasure, nodes=40):
    """Smoothed gram by tensor Gauss-Hermite quadrature (oracle, d <= 2)."""
    x, wts = hermegauss(nodes)
    wts = wts / wts.sum()
    d = V.shape[1]
    grids = np.meshgrid(*[x] * d, indexing="ij")
    T = np.stack([g.ravel() for g in grids], 1) * np.sqrt(m.variances) + m.mean
    W = np.prod(np.meshgrid(*[wts] * d, indexing="ij"), axis=0).ravel()
    KT = gram(V, T, p)
    return (KT * W) @ KT.T


def reference_moments(model: FittedModel, measure, w, z):
    """Single-point moments written out term by term with dense inverses."""
    d, p = model.data, model.params
    K1 = gram(d.v1, d.v1, p.kv) * (1 if d.w1 is None else gram(d.w1, d.w1, p.kw))
    Kinv = np.linalg.inv(K1 + p.sigma2 * np.eye(d.n1))
    kw = np.ones(d.n1) if d.w1 is None else gram(d.w1, np.atleast_2d(w), p.kw)[:, 0]
    kww = 1.0 if d.w1 is None else p.kw.amplitude
    D = np.diag(kw)
    alpha = D @ Kinv @ d.y1
    A = D @ Kinv @ D
    kz = gram(d.z2, np.atleast_2d(z), p.kz)[:, 0]
    beta = np.linalg.solve(gram(d.z2, d.z2, p.kz) + p.eta2 * np.eye(d.n2), kz)
    khat = p.kz.amplitude - kz @ beta
    K21 = gram(d.v2, d.v1, p.kv)
    K22 = gram(d.v2, d.v2, p.kv)
    Kt = ktilde_quadrature(d.v1, p.kv, measure)
    mean = beta @ K21 @ alpha
    s1 = kww * beta @ K22 @ beta - beta @ K21 @ A @ K21.T @ beta
    s2 = khat * (alpha @ Kt @ alpha - np.trace(A @ Kt))
    s3 = p.kv.amplitude * khat * kww
    return mean, s1, s2, s3


def _point(model, rng):
    z = rng.normal(size=model.params.kz.dim)
    w = None if model.params.kw is None else rng.normal(size=model.params.kw.dim)
    return w, z


@pytest.mark.parametrize("layout", [dict(dw=1), dict(dw=0), dict(dw=1, fusion=True, n2=15), dict(dw=0, dv=2, fusion=True, n2=25)])
def test_moments_match_term_by_term_reference(layout):
    rng = np.random.default_rng(0)
    model = make_model(1, n=20, **layout)
    meas = SpectralMeasure.from_data(np.vstack([model.data.v1, model.data.v2]), 2.0)
    for _ in range(3):
        w, z = _point(model, rng)
        pm = posterior_moments(model, None, meas, w, z)
        mean, s1, s2, s3 = reference_moments(model, meas, w, z)
        assert pm.mean == pytest.approx(mean, abs=1e-10)
        assert pm.s1 == pytest.approx(s1, abs=1e-9)
        assert pm.s2 == pytest.approx(s2, abs=1e-9)
        assert pm.s3 == pytest.approx(s3, abs=1e-12)
        assert pm.variance == pytest.approx(pm.s1 + pm.s2 + pm.s3, abs=1e-10)


def test_noiseless_single_point_interpolation():
    z = np.array([[0.4]])
    d = TwoStageData(np.array([1.7]), None, z.copy(), z.copy(), z.copy())
    p = ModelParams(None, KernelParams([1.0]), KernelParams([1.0]), 0.0, 0.0)
    pm = posterior_moments(FittedModel(d, p), None, SpectralMeasure([0.4]), None, z)
    assert pm.mean == pytest.approx(1.7, abs=1e-12)
    assert pm.variance == pytest.approx(0.0, abs=1e-12)


def test_prior_reversion_large_noise():
    rng = np.random.default_rng(1)
    d = make_data(rng, n=15)
    model = FittedModel(d, make_params(rng, d, sigma2=1e12))
    pm = posterior_batch(model, SpectralMeasure.from_data(d.v1), rng.normal(size=(5, 1)), rng.normal(size=(5, 1)))
    assert np.abs(pm.mean).max() < 1e-9


@given(st.integers(0, 10_000), st.sampled_from([0, 1, 2]), st.booleans())
def test_mean_equals_plugin_estimator(seed, dw, fusion):
    model = make_model(seed, n=12, dw=dw, fusion=fusion, n2=9)
    rng = np.random.default_rng(seed + 1)
    W = None if dw == 0 else rng.normal(size=(4, dw))
    Z = rng.normal(size=(4, 1))
    pm = posterior_batch(model, SpectralMeasure.from_data(model.data.v1), W, Z)
    plug = plugin_estimator(model.data, model.params, None, W, Z)
    assert np.abs(pm.mean - plug).max() <= 1e-10


@given(st.integers(0, 10_000), st.sampled_from([0, 1]))
def test_cross_cov_coherence(seed, dw):
    model = make_model(seed, n=15, dw=dw)
    rng = np.random.default_rng(seed)
    meas = SpectralMeasure.from_data(model.data.v1, rng.choice([0.25, 1.0, 4.0]))
    p, q = _point(model, rng), _point(model, rng)
    var = posterior_moments(model, None, meas, *p).variance
    assert posterior_cross_cov(model, None, meas, p, p) == pytest.approx(var, abs=1e-10)
    assert posterior_cross_cov(model, None, meas, p, q) == pytest.approx(posterior_cross_cov(model, None, meas, q, p), abs=1e-10)
    W = None if dw == 0 else np.vstack([p[0], q[0]])
    _, C = posterior_cov(model, meas, W, np.vstack([p[1], q[1]]))
    assert np.linalg.eigvalsh(C).min() >= -1e-8


def test_fusion_with_identical_tables_equals_single():
    rng = np.random.default_rng(2)
    d = make_data(rng, n=18, dw=1, dv=2)
    p = make_params(rng, d)
    fused = TwoStageData(d.y1, d.w1, d.v1, d.v1.copy(), d.z2, shared=False)
    meas = SpectralMeasure.from_data(d.v1)
    W, Z = rng.normal(size=(6, 1)), rng.normal(size=(6, 1))
    a = posterior_batch(FittedModel(d, p), meas, W, Z)
    b = posterior_batch(FittedModel(fused, p), meas, W, Z)
    for f in ("mean", "variance", "s1", "s2", "s3"):
        assert np.abs(getattr(a, f) - getattr(b, f)).max() <= 1e-10


def test_variance_floor_far_from_data():
    model = make_model(3, n=20, dw=1)
    meas = SpectralMeasure.from_data(model.data.v1)
    far = model.data.w1.max() + 10 * model.params.kw.lengthscales[0]
    pm = posterior_moments(model, None, meas, [far], [0.0])
    assert pm.s3 > 0
    assert pm.variance >= 0.5 * pm.s3


def test_incremental_moments_match_covariance():
    model = make_model(4, n=15, dw=1)
    meas = SpectralMeasure.from_data(model.data.v1)
    p, q = ([0.3], [0.1]), ([-0.5], [0.7])
    m, v = incremental_moments(model, None, meas, p, q)
    a, b = posterior_moments(model, None, meas, *p), posterior_moments(model, None, meas, *q)
    c = posterior_cross_cov(model, None, meas, p, q)
    assert m == pytest.approx(a.mean - b.mean, abs=1e-12)
    assert v == pytest.approx(a.variance + b.variance - 2 * c, abs=1e-10)


def test_ate_degenerate_marginals():
    model = make_model(5, n=15, dw=0)
    meas = SpectralMeasure.from_data(model.data.v1)
    one = ate_moments(model, None, meas, [[0.2]])
    pt = posterior_moments(model, None, meas, None, [0.2])
    two = ate_moments(model, None, meas, [[0.2], [0.2]])
    for r in (one, two):
        assert r.mean == pytest.approx(pt.mean, abs=1e-12)
        assert r.variance == pytest.approx(pt.variance, abs=1e-10)
    with pytest.raises(ValueError):
        ate_moments(model, None, meas, np.empty((0, 1)))


def test_healthcare_ate_bounds_and_curve():
    from impspec.gp import fit_model
    from impspec.simulators import DgpSpec, simulate

    d = simulate(DgpSpec("healthcare", 100, 3)).to_arrays()
    model = fit_model(d, iters=100)
    meas = SpectralMeasure.from_data(np.vstack([d.v1, d.v2]))
    rows = d.z2[:, 1:]
    marg = np.column_stack([np.full(len(rows), 0.4), rows])
    ate = ate_moments(model, None, meas, marg)
    pts = posterior_batch(model, meas, None, marg)
    assert 0 <= ate.variance <= pts.variance.max()
    curve = ate_curve(model, meas, [0.4, 0.8], [0], rows)
    assert curve.mean[0] == pytest.approx(ate.mean, rel=1e-9, abs=1e-10)
    assert curve.variance[0] == pytest.approx(ate.variance, rel=1e-7, abs=1e-10)


def test_credible_interval_cases():
    from impspec.posterior import PosteriorMoments

    lo, hi = credible_interval(PosteriorMoments(0.0, 1.0, 0, 0, 1.0), 0.95)
    assert lo == pytest.approx(-1.959964, abs=1e-6) and hi == pytest.approx(1.959964, abs=1e-6)
    assert credible_interval(PosteriorMoments(2.0, 0.0, 0, 0, 0), 0.5) == (2.0, 2.0)
    pm = PosteriorMoments(0.3, 0.7, 0, 0, 0.7)
    prev = (0.3, 0.3)
    for a in np.linspace(0.05, 0.95, 10):
        lo, hi = credible_interval(pm, a)
        assert lo <= prev[0] and hi >= prev[1]
        prev = (lo, hi)
    with pytest.raises(ValueError):
        credible_interval(pm, 1.0)


def test_query_checks_w_layout():
    model = make_model(6, n=10, dw=1)
    meas = SpectralMeasure.from_data(model.data.v1)
    q = CausalQuery("custom", {"Y": ["y"], "W": [], "V": ["v"], "Z": ["z"]})
    with pytest.raises(ValueError):
        posterior_batch(model, meas, [[0.0]], [[0.0]], q)
    with pytest.raises(ValueError):
        posterior_batch(model, meas, None, [[0.0]])
    assert CausalQuery.from_dict(q.to_dict()) == q
