import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from impspec.kernels import KernelParams, SpectralMeasure, as_points, gram, nuclear_dominant_gram, smoothed_gram, tau


def quad_r(x, x2, ls, amp, m, s2):
    """1-D oracle for the smoothed kernel by adaptive quadrature."""
    f = lambda t: amp**2 * np.exp(-((x - t) ** 2) / (2 * ls**2)) * np.exp(-((t - x2) ** 2) / (2 * ls**2)) * stats.norm.pdf(t, m, np.sqrt(s2))
    return integrate.quad(f, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-12)[0]


def test_gram_diagonal_is_amplitude():
    p = KernelParams([0.3, 2.0], 1.7)
    X = np.random.default_rng(0).normal(size=(5, 2))
    assert np.allclose(np.diag(gram(X, X, p)), 1.7)


def test_gram_unit_distance():
    assert gram([[0.0]], [[1.0]], KernelParams([1.0]))[0, 0] == pytest.approx(0.6065306597, abs=1e-10)


def test_gram_psd_random_3d():
    X = np.random.default_rng(1).normal(size=(20, 3))
    K = gram(X, X, KernelParams([0.7, 1.1, 2.0]))
    assert np.linalg.eigvalsh(K).min() >= -1e-8
    assert np.abs(K - K.T).max() <= 1e-12


@given(st.integers(2, 60), st.integers(1, 4), st.integers(0, 10_000))
def test_gram_symmetric_psd_property(n, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d)) * rng.uniform(0.1, 3)
    p = KernelParams(rng.uniform(0.1, 3, d), rng.uniform(0.1, 3))
    K = gram(X, X, p)
    assert np.abs(K - K.T).max() <= 1e-12
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * K.max()


def test_gram_permutation_equivariant():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(8, 2))
    p = KernelParams([0.5, 1.5])
    perm = rng.permutation(8)
    assert np.allclose(gram(X[perm], X[perm], p), gram(X, X, p)[np.ix_(perm, perm)], atol=1e-14)


def test_gram_rejects_bad_input():
    p = KernelParams([1.0, 1.0])
    with pytest.raises(ValueError):
        gram(np.zeros((3, 3)), np.zeros((3, 3)), p)
    with pytest.raises(ValueError):
        gram([[np.nan, 0.0]], [[0.0, 0.0]], p)
    with pytest.raises(ValueError):
        KernelParams([0.0])
    with pytest.raises(ValueError):
        KernelParams([1.0], -1.0)


def test_as_points_shapes():
    assert as_points(3.0).shape == (1, 1)
    assert as_points([1.0, 2.0, 3.0]).shape == (3, 1)
    assert as_points([1.0, 2.0], dim=2).shape == (1, 2)


def test_smoothed_gram_quadrature_value():
    r0 = quad_r(0.0, 0.0, 1.0, 1.0, 0.0, 1.0)
    # exp(-t^2/2)^2 against N(0,1) integrates to 1/sqrt(3)
    assert r0 == pytest.approx(1 / np.sqrt(3), rel=1e-10)
    K = smoothed_gram([[0.0]], KernelParams([1.0]), SpectralMeasure([0.0], 1.0, [1.0]))
    assert K[0, 0] == pytest.approx(r0, rel=1e-12)


def test_smoothed_gram_point_mass_limit():
    p = KernelParams([0.8], 1.3)
    V = np.array([[-0.5], [0.2], [1.0]])
    m = SpectralMeasure([0.3], 1e-12, [1.0])
    k = gram(V, [[0.3]], p)[:, 0]
    assert np.allclose(smoothed_gram(V, p, m), np.outer(k, k), atol=1e-9)


def test_smoothed_gram_mc_matches_closed_form():
    p = KernelParams([0.9], 1.2)
    V = np.linspace(-1, 1, 5)[:, None]
    m = SpectralMeasure([0.1], 1.0, [0.8])
    exact = smoothed_gram(V, p, m)
    mc = smoothed_gram(V, p, m, mc_samples=1_000_000, seed=3)
    assert np.max(np.abs(mc - exact) / exact) <= 0.01


def test_smoothed_gram_mc_needs_seed_and_samples():
    p = KernelParams([1.0])
    m = SpectralMeasure([0.0])
    with pytest.raises(ValueError):
        smoothed_gram([[0.0]], p, m, mc_samples=0, seed=1)
    with pytest.raises(ValueError):
        smoothed_gram([[0.0]], p, m, mc_samples=10)


def test_smoothed_gram_psd_multi_dim():
    rng = np.random.default_rng(4)
    V = rng.normal(size=(30, 3))
    K = smoothed_gram(V, KernelParams([0.5, 1.0, 2.0], 2.0), SpectralMeasure.from_data(V, 4.0))
    assert np.linalg.eigvalsh(K).min() >= -1e-10


def test_nuclear_gram_symmetric_and_quadrature():
    rng = np.random.default_rng(5)
    ls, amp, mu, s2 = 0.7, 1.4, 0.2, 1.5
    p, m = KernelParams([ls], amp), SpectralMeasure([mu], 1.0, [s2])
    x, x2 = rng.normal(size=5) * 2, rng.normal(size=5) * 2
    R = nuclear_dominant_gram(x[:, None], x2[:, None], p, m)
    Rt = nuclear_dominant_gram(x2[:, None], x[:, None], p, m)
    assert np.abs(R - Rt.T).max() <= 1e-12
    for i in range(5):
        ref = quad_r(x[i], x2[i], ls, amp, mu, s2)
        assert R[i, i] == pytest.approx(ref, rel=1e-6)


def test_nuclear_gram_decays_outside_support():
    p, m = KernelParams([1.0]), SpectralMeasure([0.0], 1.0, [1.0])
    xs = np.linspace(2, 12, 30)[:, None]
    r = nuclear_dominant_gram(xs, [[0.0]], p, m)[:, 0]
    assert np.all(np.diff(r) < 0)
    assert r[-1] < 1e-12


def test_tau_is_amplitude():
    assert tau(KernelParams([1.0])) == 1.0
    assert tau(KernelParams([0.3], 2.5)) == 2.5


def test_measure_from_data_and_scale():
    V = np.random.default_rng(6).normal(size=(50, 2)) * [1.0, 3.0]
    m = SpectralMeasure.from_data(V)
    assert np.allclose(m.variances, V.var(0, ddof=1))
    assert np.allclose(m.with_scale(4.0).variances, 4 * V.var(0, ddof=1))
    assert np.allclose(SpectralMeasure.from_data(V, base="std").base, V.std(0, ddof=1))
    back = SpectralMeasure.from_dict(m.to_dict())
    assert np.array_equal(back.base, m.base) and np.array_equal(back.mean, m.mean) and back.scale == m.scale
    with pytest.raises(ValueError):
        SpectralMeasure([0.0], 0.0)
