"""Finite-rank posterior sampler used to cross-check the closed-form moments.

The regression function is truncated to ``m`` features in the ``V``
direction, so the effect becomes a dot product ``gamma_m = f . L`` of two
independent Gaussian vectors. Features come either from a Nystrom
eigendecomposition under the integrating measure, or from random Fourier
features with uniform weights ``1/m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .gp import FittedModel
from .kernels import KernelParams, SpectralMeasure, as_points, gram

__all__ = ["TruncatedFeatures", "nystrom_eigen", "rff_features", "sample_truncated_gamma", "truncated_moments"]

_EIG_RTOL = 1e-12


@dataclass
class TruncatedFeatures:
    """Eigenvalues and a feature map over ``V``.

    ``phi(V)`` returns the unit-weight features ``phi_i`` and ``scaled(V)``
    returns ``sqrt(lambda_i) phi_i``, so that ``scaled(V) @ scaled(V2).T``
    approximates the kernel.
    """

    kind: str
    eigenvalues: np.ndarray
    params: KernelParams
    seed: int | None
    landmarks: np.ndarray | None = None
    vectors: np.ndarray | None = None
    freqs: np.ndarray | None = None

    @property
    def count(self) -> int:
        return self.eigenvalues.size

    def scaled(self, V) -> np.ndarray:
        V = as_points(V, self.params.dim)
        if self.kind == "nystrom":
            T = self.landmarks.shape[0]
            return gram(V, self.landmarks, self.params) @ self.vectors / np.sqrt(T * self.eigenvalues)
        proj = V @ self.freqs.T
        amp = np.sqrt(2.0 * self.params.amplitude / self.count)
        return amp * np.hstack([np.cos(proj), np.sin(proj)])

    def phi(self, V) -> np.ndarray:
        return self.scaled(V) / np.sqrt(self.eigenvalues)

    def kernel(self, V, V2) -> np.ndarray:
        return self.scaled(V) @ self.scaled(V2).T


def nystrom_eigen(params: KernelParams, measure: SpectralMeasure, T: int, m: int | None = None, seed=None) -> TruncatedFeatures:
    """Top-``m`` eigenpairs of the kernel operator under ``measure``.

    Draws ``T`` landmarks from the measure, eigendecomposes ``K_TT / T`` and
    extends eigenvectors out of sample. Modes with eigenvalue below
    ``1e-12`` of the largest are discarded, so fewer than ``m`` may be kept.
    """
    m = T if m is None else int(m)
    if not 1 <= m <= T:
        raise ValueError("need 1 <= m <= T")
    if measure.dim != params.dim:
        raise ValueError("measure dimension does not match kernel dimension")
    rng = np.random.default_rng(seed)
    L = measure.sample(T, rng)
    K = gram(L, L, params) / T
    if m < T:
        lam, U = linalg.eigh(K, subset_by_index=(T - m, T - 1), driver="evr")
    else:
        lam, U = linalg.eigh(K)
    order = np.argsort(lam)[::-1]
    lam, U = lam[order], U[:, order]
    keep = min(m, int(np.sum(lam > _EIG_RTOL * lam[0])))
    return TruncatedFeatures("nystrom", lam[:keep].copy(), params, seed, L, U[:, :keep].copy())


def rff_features(params: KernelParams, m: int, seed=None, family: str = "gaussian") -> TruncatedFeatures:
    """``m`` random Fourier features (``m/2`` frequencies, paired cos/sin).

    The pairing makes ``k_m(v, v)`` equal the amplitude exactly.
    """
    if family != "gaussian":
        raise ValueError(f"random features are only implemented for the Gaussian kernel, not {family!r}")
    if m < 2 or m % 2:
        raise ValueError("m must be an even number >= 2")
    rng = np.random.default_rng(seed)
    freqs = rng.standard_normal((m // 2, params.dim)) / params.lengthscales
    return TruncatedFeatures("rff", np.full(m, 1.0 / m), params, seed, freqs=freqs)


def _psd_sqrt(S):
    lam, U = linalg.eigh(0.5 * (S + S.T))
    return U * np.sqrt(np.maximum(lam, 0.0))


def truncated_moments(model: FittedModel, features: TruncatedFeatures, w, z):
    """Means and covariance factors of the two Gaussian factors at ``(w, z)``.

    Returns ``(m_f, B, kww, m_L, c_L)`` where the ``f`` covariance is
    ``kww I - B^T Kinv B`` and the ``L`` covariance is ``diag(c_L)``.
    """
    Z = as_points(z, model.params.kz.dim)
    if Z.shape[0] != 1:
        raise ValueError("one point at a time")
    if model.params.kw is None:
        dw = np.ones(model.data.n1)
        kww = 1.0
    else:
        Wp = as_points(w, model.params.kw.dim)
        dw = model.kw_vec(Wp)[:, 0]
        kww = float(gram(Wp, Wp, model.params.kw)[0, 0])
    B = dw[:, None] * features.scaled(model.data.v1)
    m_f = B.T @ model.coef
    kz = model.kz_vec(Z)[:, 0]
    beta = model.solve2(kz)
    khat = max(float(gram(Z, Z, model.params.kz)[0, 0] - kz @ beta), 0.0)
    m_L = features.scaled(model.data.v2).T @ beta
    return m_f, B, kww, m_L, features.eigenvalues * khat


def sample_truncated_gamma(model: FittedModel, query, features: TruncatedFeatures, w, z, n_samples: int, seed, chunk: int = 2000):
    """Draw ``n_samples`` values of ``gamma_m(w, z) = f . L``.

    ``f ~ N(m_f, kww I - B^T Kinv B)`` is sampled through a thin QR of
    ``B^T`` (the covariance is the identity plus a rank-``n`` update) and
    ``L ~ N(m_L, diag(c_L))``. Chunks use independent child seeds.
    """
    if query is not None:
        query.check(model)
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    m_f, B, kww, m_L, c_L = truncated_moments(model, features, w, z)
    Q, R = linalg.qr(B.T, mode="economic")
    Kinv = model.solve1(np.eye(model.data.n1))
    small = kww * np.eye(R.shape[0]) - R @ Kinv @ R.T
    Csmall = _psd_sqrt(small)
    sL = np.sqrt(c_L)
    sk = np.sqrt(kww)
    m = m_f.size
    out = np.empty(n_samples)
    children = np.random.SeedSequence(seed).spawn((n_samples + chunk - 1) // chunk)
    for c, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        b = min(chunk, n_samples - c * chunk)
        eps = rng.standard_normal((b, m))
        xi = rng.standard_normal((b, Csmall.shape[1]))
        L = m_L + rng.standard_normal((b, m)) * sL
        LQ = L @ Q
        # f = m_f + sk (I - Q Q^T) eps + Q Csmall xi, dotted with L
        g = L @ m_f + sk * (np.einsum("ij,ij->i", eps, L) - np.einsum("ij,ij->i", eps @ Q, LQ))
        g += np.einsum("ij,ij->i", xi @ Csmall.T, LQ)
        out[c * chunk : c * chunk + b] = g
    return out
