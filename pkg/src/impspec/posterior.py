"""Closed-form posterior moments of the causal effect ``gamma(w, z)``.

For evaluation points ``p = (w_p, z_p)`` the quantities are

* ``alpha_p = D(w_p) (K_WW * K_VV + sigma2 I)^{-1} y``
* ``beta_p  = (K_ZZ + eta2 I)^{-1} k_Z(z_p)``
* ``khat(z_p, z_q) = k_Z(z_p, z_q) - k_Z(z_p)^T beta_q``

and the posterior covariance is ``C1 + C2 + C3`` with

* ``C1 = k_W(w_p, w_q) beta_p^T K22 beta_q - u_p^T Kinv u_q``, ``u = (K12 beta) * k_W``
* ``C2 = khat(z_p, z_q) (alpha_p^T Ktilde alpha_q - k_W(w_p)^T (Ktilde * Kinv) k_W(w_q))``
* ``C3 = tau k_W(w_p, w_q) khat(z_p, z_q)``

``K12`` is the ``V`` cross-gram between the stage-one and stage-two rows and
``Ktilde`` the measure-smoothed gram on the stage-one ``V`` rows. A single
dataset is the special case where both stages share rows. When ``W`` is
empty every ``k_W`` factor is one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .gp import FittedModel, NumericalError
from .kernels import KernelParams, SpectralMeasure, as_points, gram, smoothed_gram

__all__ = [
    "ESTIMANDS",
    "CausalQuery",
    "PosteriorMoments",
    "posterior_moments",
    "posterior_batch",
    "posterior_cov",
    "posterior_cross_cov",
    "incremental_moments",
    "ate_moments",
    "ate_curve",
    "averaged_z_features",
    "effect_features",
    "moments_from_features",
    "mean_from_features",
    "credible_interval",
    "NEG_VAR_TOL",
]

ESTIMANDS = ("CATE_backdoor", "ATT_frontdoor", "ATE", "custom")
NEG_VAR_TOL = 1e-8


@dataclass(frozen=True)
class CausalQuery:
    """Which columns play ``W``, ``V`` and ``Z``, and which data layout is used."""

    estimand: str = "custom"
    roles: dict = field(default_factory=dict)
    fusion: bool = False

    def __post_init__(self):
        if self.estimand not in ESTIMANDS:
            raise ValueError(f"unknown estimand {self.estimand!r}; choose from {ESTIMANDS}")

    @property
    def w_empty(self) -> bool:
        return not self.roles.get("W")

    def check(self, model: FittedModel):
        if self.roles and self.w_empty == model.data.has_w:
            raise ValueError("query and model disagree on whether W is empty")
        if self.fusion and model.data.shared:
            raise ValueError("fusion query on a single-table model")

    def to_dict(self) -> dict:
        return {"estimand": self.estimand, "roles": dict(self.roles), "fusion": self.fusion}

    @classmethod
    def from_dict(cls, d: dict) -> "CausalQuery":
        return cls(d.get("estimand", "custom"), dict(d.get("roles", {})), bool(d.get("fusion", False)))

    @classmethod
    def for_dataset(cls, ds, estimand: str = "custom") -> "CausalQuery":
        return cls(estimand, dict(ds.roles), ds.fusion)


@dataclass
class PosteriorMoments:
    """Posterior mean and variance split into its three terms.

    Fields are floats for a single point and arrays for a batch.
    """

    mean: float | np.ndarray
    variance: float | np.ndarray
    s1: float | np.ndarray
    s2: float | np.ndarray
    s3: float | np.ndarray
    at: tuple = ()

    @property
    def std(self):
        return np.sqrt(self.variance)


def _measure_key(m: SpectralMeasure):
    return (tuple(m.mean), m.scale, tuple(m.base))


def _ktilde(model: FittedModel, measure: SpectralMeasure) -> np.ndarray:
    cache = model.__dict__.setdefault("_ktilde_cache", {})
    key = _measure_key(measure)
    if key not in cache:
        cache[key] = smoothed_gram(model.data.v1, model.params.kv, measure)
    return cache[key]


def _kinv(model: FittedModel) -> np.ndarray:
    if "_kinv" not in model.__dict__:
        Ki = model.solve1(np.eye(model.data.n1))
        model.__dict__["_kinv"] = 0.5 * (Ki + Ki.T)
    return model.__dict__["_kinv"]


def _points(model: FittedModel, w, z):
    """Broadcast ``w`` and ``z`` to matching point sets; ``w`` is ``None`` if W is empty."""
    p = model.params
    Z = as_points(z, p.kz.dim)
    if p.kw is None:
        if w is not None and np.size(w) > 0:
            raise ValueError("this model has no W; pass w=None")
        return None, Z
    if w is None:
        raise ValueError("this model conditions on W; w is required")
    W = as_points(w, p.kw.dim)
    if W.shape[0] == 1 and Z.shape[0] > 1:
        W = np.repeat(W, Z.shape[0], axis=0)
    elif Z.shape[0] == 1 and W.shape[0] > 1:
        Z = np.repeat(Z, W.shape[0], axis=0)
    if W.shape[0] != Z.shape[0]:
        raise ValueError("w and z must have the same number of points (or one of them a single point)")
    return W, Z


def _clamp(var, scale):
    tol = NEG_VAR_TOL * np.maximum(1.0, scale)
    if np.any(var < -tol):
        raise NumericalError(f"posterior variance {np.min(var):.3g} is negative beyond round-off")
    return np.maximum(var, 0.0)


class _Features:
    """Per-point ingredients: ``k_W`` columns, ``beta`` columns and the small grams."""

    def __init__(self, kW, kww, beta, khat):
        self.kW, self.kww, self.beta, self.khat = kW, kww, beta, khat


def _features(model: FittedModel, W, Z) -> _Features:
    kW = model.kw_vec(W) if W is not None else np.ones((model.data.n1, Z.shape[0]))
    kww = np.ones((Z.shape[0], Z.shape[0])) if W is None else gram(W, W, model.params.kw)
    kZ = model.kz_vec(Z)
    beta = model.solve2(kZ)
    khat = gram(Z, Z, model.params.kz) - kZ.T @ beta
    return _Features(kW, kww, beta, 0.5 * (khat + khat.T))


def _mean(model: FittedModel, f: _Features) -> np.ndarray:
    alpha = f.kW * model.coef[:, None]
    return np.einsum("ip,ip->p", f.beta, model.K21 @ alpha)


def _cov_terms(model: FittedModel, measure: SpectralMeasure, f: _Features):
    """The three covariance blocks over the point set described by ``f``."""
    Kinv = _kinv(model)
    Kt = _ktilde(model, measure)
    alpha = f.kW * model.coef[:, None]
    U = (model.K21.T @ f.beta) * f.kW
    c1 = f.kww * (f.beta.T @ model.K22 @ f.beta) - U.T @ Kinv @ U
    G = alpha.T @ Kt @ alpha - f.kW.T @ (Kt * Kinv) @ f.kW
    c2 = f.khat * G
    c3 = model.tau * f.kww * f.khat
    return c1, c2, c3


def _stack(model, w, z, w2, z2):
    W1, Z1 = _points(model, w, z)
    W2, Z2 = _points(model, w2, z2)
    Z = np.vstack([Z1, Z2])
    W = None if W1 is None else np.vstack([W1, W2])
    return W, Z, Z1.shape[0]


def posterior_cov(model: FittedModel, measure: SpectralMeasure, w, z, terms: bool = False):
    """Joint posterior mean vector and covariance matrix over a batch of points.

    Returns
    -------
    mean : ndarray, shape (P,)
    cov : ndarray, shape (P, P)
        Symmetrized. With ``terms=True`` a tuple ``(C1, C2, C3)`` is returned
        instead of the sum.
    """
    W, Z = _points(model, w, z)
    f = _features(model, W, Z)
    c1, c2, c3 = _cov_terms(model, measure, f)
    mean = _mean(model, f)
    if terms:
        return mean, tuple(0.5 * (c + c.T) for c in (c1, c2, c3))
    C = c1 + c2 + c3
    return mean, 0.5 * (C + C.T)


def posterior_batch(model: FittedModel, measure: SpectralMeasure, w, z, query: CausalQuery | None = None) -> PosteriorMoments:
    """Pointwise moments at a batch of points (arrays in the returned fields)."""
    if query is not None:
        query.check(model)
    W, Z = _points(model, w, z)
    mean, (c1, c2, c3) = posterior_cov(model, measure, W, Z, terms=True)
    s1, s2, s3 = np.diag(c1).copy(), np.diag(c2).copy(), np.diag(c3).copy()
    if np.any(s3 < -NEG_VAR_TOL * model.tau):
        raise NumericalError("negative third variance term")
    s3 = np.maximum(s3, 0.0)
    var = _clamp(s1 + s2 + s3, np.abs(s1) + np.abs(s2) + s3)
    return PosteriorMoments(mean, var, s1, s2, s3, (W, Z))


def posterior_moments(model: FittedModel, query: CausalQuery | None, measure: SpectralMeasure, w, z) -> PosteriorMoments:
    """Posterior mean and variance of ``gamma(w, z)`` at a single point."""
    pm = posterior_batch(model, measure, w, z, query)
    if np.size(pm.mean) != 1:
        raise ValueError("posterior_moments takes a single point; use posterior_batch")
    return PosteriorMoments(
        float(pm.mean[0]), float(pm.variance[0]), float(pm.s1[0]), float(pm.s2[0]), float(pm.s3[0]), (w, z)
    )


def posterior_cross_cov(model: FittedModel, query: CausalQuery | None, measure: SpectralMeasure, p, q) -> float:
    """``Cov[gamma(p), gamma(q)]`` for points ``p = (w, z)`` and ``q = (w2, z2)``."""
    if query is not None:
        query.check(model)
    W, Z, _ = _stack(model, p[0], p[1], q[0], q[1])
    _, C = posterior_cov(model, measure, W, Z)
    return float(0.5 * (C[0, 1] + C[1, 0]))


def incremental_moments(model: FittedModel, query: CausalQuery | None, measure: SpectralMeasure, p, q):
    """Mean and variance of the contrast ``gamma(p) - gamma(q)``."""
    if query is not None:
        query.check(model)
    W, Z, _ = _stack(model, p[0], p[1], q[0], q[1])
    mean, C = posterior_cov(model, measure, W, Z)
    var = C[0, 0] + C[1, 1] - 2 * C[0, 1]
    return float(mean[0] - mean[1]), float(_clamp(var, abs(C[0, 0]) + abs(C[1, 1])))


def ate_moments(model: FittedModel, query: CausalQuery | None, measure: SpectralMeasure, marginal_points, w=None, z=None) -> PosteriorMoments:
    """Moments of the effect averaged over an empirical marginal.

    Exactly one of ``w``/``z`` is held fixed, the other argument runs over
    ``marginal_points``. For a ``W``-free model pass ``z=None`` and the
    marginal ``z`` rows. The variance is the mean of the full covariance
    block, so correlations between marginal points are kept.
    """
    if query is not None:
        query.check(model)
    if marginal_points is None or np.size(marginal_points) == 0:
        raise ValueError("marginal_points must be non-empty")
    if z is None:
        W, Z = _points(model, w, marginal_points)
    elif w is None and model.params.kw is not None:
        W, Z = _points(model, marginal_points, z)
    else:
        raise ValueError("exactly one of w, z must be left free")
    mean, (c1, c2, c3) = posterior_cov(model, measure, W, Z, terms=True)
    s1, s2, s3 = float(c1.mean()), float(c2.mean()), float(c3.mean())
    s3 = max(s3, 0.0)
    var = float(_clamp(s1 + s2 + s3, abs(s1) + abs(s2) + s3))
    return PosteriorMoments(float(mean.mean()), var, s1, s2, s3, (w, z))


def averaged_z_features(model: FittedModel, values, fixed_dims, marginal_rows):
    """``k_Z`` column and ``k_Z``-gram of ``Z`` points averaged over marginal rows.

    Grid point ``g`` fixes the ``Z`` coordinates ``fixed_dims`` to
    ``values[g]``; the remaining coordinates run over ``marginal_rows``. The
    Gaussian kernel factorizes over dimensions, so the average over rows is a
    scalar factor on the fixed-coordinate kernel.

    Returns
    -------
    kZ : ndarray, shape (n2, G)
    kzz : ndarray, shape (G, G)
    """
    kz: KernelParams = model.params.kz
    fixed = np.atleast_1d(np.asarray(fixed_dims, dtype=int))
    free = np.setdiff1d(np.arange(kz.dim), fixed)
    vals = as_points(values, fixed.size)
    kf = KernelParams(kz.lengthscales[fixed], 1.0)
    kZ = kz.amplitude * gram(model.data.z2[:, fixed], vals, kf)
    kzz = kz.amplitude * gram(vals, vals, kf)
    if free.size:
        R = as_points(marginal_rows, free.size)
        if R.shape[0] == 0:
            raise ValueError("marginal_rows must be non-empty")
        kr = KernelParams(kz.lengthscales[free], 1.0)
        kZ = kZ * gram(model.data.z2[:, free], R, kr).mean(axis=1)[:, None]
        kzz = kzz * gram(R, R, kr).mean()
    return kZ, kzz


def effect_features(model: FittedModel, w=None, z=None, kZ=None, kzz=None) -> _Features:
    """Ingredients of the moments at a batch of points.

    Either pass points ``z`` (and ``w``), or precomputed ``kZ``/``kzz`` from
    :func:`averaged_z_features` together with a single fixed ``w``.
    """
    if kZ is None:
        W, Z = _points(model, w, z)
        return _features(model, W, Z)
    G = kZ.shape[1]
    beta = model.solve2(kZ)
    khat = kzz - kZ.T @ beta
    khat = 0.5 * (khat + khat.T)
    if model.params.kw is None:
        if w is not None:
            raise ValueError("this model has no W; pass w=None")
        return _Features(np.ones((model.data.n1, G)), np.ones((G, G)), beta, khat)
    if w is None:
        raise ValueError("w is required for a model that conditions on W")
    Wp = as_points(w, model.params.kw.dim)
    if Wp.shape[0] != 1:
        raise ValueError("averaged features hold a single w fixed")
    kW = np.repeat(model.kw_vec(Wp), G, axis=1)
    return _Features(kW, np.full((G, G), model.params.kw.amplitude), beta, khat)


def moments_from_features(model: FittedModel, measure: SpectralMeasure, f: _Features, full_cov: bool = False):
    """Pointwise moments (and optionally the joint covariance) from features."""
    mean = _mean(model, f)
    c1, c2, c3 = _cov_terms(model, measure, f)
    s1, s2, s3 = np.diag(c1).copy(), np.diag(c2).copy(), np.maximum(np.diag(c3), 0.0)
    var = _clamp(s1 + s2 + s3, np.abs(s1) + np.abs(s2) + s3)
    pm = PosteriorMoments(mean, var, s1, s2, s3)
    if full_cov:
        C = c1 + c2 + c3
        return pm, 0.5 * (C + C.T)
    return pm


def mean_from_features(model: FittedModel, f: _Features) -> np.ndarray:
    return _mean(model, f)


def ate_curve(model: FittedModel, measure: SpectralMeasure, values, fixed_dims, marginal_rows, w=None, full_cov: bool = False):
    """Averaged effect along a grid of partial interventions on ``Z``.

    Grid point ``g`` fixes the ``Z`` coordinates ``fixed_dims`` to
    ``values[g]`` and averages ``gamma(w, z)`` over ``marginal_rows``, which
    supply the remaining coordinates. Averaging is done inside ``beta`` and
    ``khat`` (see :func:`averaged_z_features`), so the cost is linear in the
    number of marginal rows and the result equals :func:`ate_moments` at
    each grid point.

    Returns
    -------
    PosteriorMoments with array fields (and the grid covariance when
    ``full_cov``).
    """
    kZ, kzz = averaged_z_features(model, values, fixed_dims, marginal_rows)
    f = effect_features(model, w, kZ=kZ, kzz=kzz)
    return moments_from_features(model, measure, f, full_cov)


def credible_interval(moments: PosteriorMoments, alpha):
    """Central Gaussian interval ``mean +/- z_{(1+alpha)/2} sd`` of mass ``alpha``.

    Works elementwise on batched moments and on arrays of ``alpha``.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any((alpha <= 0) | (alpha >= 1)):
        raise ValueError("alpha must lie strictly between 0 and 1")
    var = np.asarray(moments.variance, dtype=float)
    if np.any(var < -NEG_VAR_TOL):
        raise ValueError("variance is negative")
    half = stats.norm.ppf(0.5 * (1 + alpha)) * np.sqrt(np.maximum(var, 0.0))
    lo, hi = moments.mean - half, moments.mean + half
    if np.ndim(lo) == 0:
        return float(lo), float(hi)
    return lo, hi
