"""Comparison methods: the two-stage kernel ridge plug-in, a finite-dimensional
nuclear-dominant posterior, and a two-stage sampling GP."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .gp import (
    NumericalError,
    ModelParams,
    TwoStageData,
    adam_maximize,
    chol_solve,
    cholesky_jitter,
    _LOG_BOUNDS,
    _NOISE_FLOOR,
    _spread,
)
from .kernels import KernelParams, SpectralMeasure, as_points, gram, nuclear_dominant_gram
from .posterior import NEG_VAR_TOL, PosteriorMoments

__all__ = [
    "plugin_estimator",
    "plugin_second_moment",
    "BayesImpModel",
    "fit_bayesimp",
    "bayesimp_moments",
    "bayesimp_cov",
    "SamplingStage2",
    "fit_sampling_stage2",
    "sampling_gp_effect",
    "BAYESIMP_JITTER",
]

BAYESIMP_JITTER = 1e-6


def _wz(params: ModelParams, w, z):
    Z = as_points(z, params.kz.dim)
    if params.kw is None:
        return None, Z
    W = as_points(w, params.kw.dim)
    if W.shape[0] == 1 and Z.shape[0] > 1:
        W = np.repeat(W, Z.shape[0], axis=0)
    elif Z.shape[0] == 1 and W.shape[0] > 1:
        Z = np.repeat(Z, W.shape[0], axis=0)
    if W.shape[0] != Z.shape[0]:
        raise ValueError("w and z must have matching point counts")
    return W, Z


def plugin_estimator(data: TwoStageData, params: ModelParams, query, w, z, y=None):
    """Two-stage kernel ridge estimate ``beta(z)^T K_{V2 V1} alpha(w)``.

    Uses dense ``np.linalg.solve`` rather than the cached Cholesky factors so
    it is an independent computation of the same quantity. ``y`` replaces
    the outcome vector (used for second-moment estimates). Returns one
    value per evaluation point.
    """
    W, Z = _wz(params, w, z)
    y = data.y1 if y is None else np.asarray(y, dtype=float)
    K1 = gram(data.v1, data.v1, params.kv)
    if data.w1 is not None:
        K1 = K1 * gram(data.w1, data.w1, params.kw)
        kW = gram(data.w1, W, params.kw)
    else:
        kW = np.ones((data.n1, Z.shape[0]))
    coef = np.linalg.solve(K1 + params.sigma2 * np.eye(data.n1), y)
    alpha = kW * coef[:, None]
    KZ = gram(data.z2, data.z2, params.kz)
    beta = np.linalg.solve(KZ + params.eta2 * np.eye(data.n2), gram(data.z2, Z, params.kz))
    K21 = gram(data.v2, data.v1, params.kv)
    return np.einsum("ip,ip->p", beta, K21 @ alpha)


def plugin_second_moment(data: TwoStageData, params: ModelParams, query, w, z):
    """Plug-in ``E[Y^2 | do(.)]`` by regressing ``Y^2`` in stage one."""
    return plugin_estimator(data, params, query, w, z, y=data.y1**2)


# --- finite-dimensional nuclear-dominant posterior ---------------------------


@dataclass
class BayesImpModel:
    """Nuclear-dominant two-stage posterior with coefficient approximations.

    ``f`` has prior kernel ``r_W x r_V`` where each ``r`` is the Gaussian
    kernel smoothed by a Gaussian measure. Its posterior on the pooled
    ``(W, V)`` rows is projected onto coefficients ``a`` of the ordinary
    kernel, and likewise the embedding posterior onto ``b(z)``.
    """

    data: TwoStageData
    params: ModelParams
    measure_v: SpectralMeasure
    measure_w: SpectralMeasure | None
    jitter: float = BAYESIMP_JITTER

    def __post_init__(self):
        d, p = self.data, self.params
        if d.w1 is not None and not d.shared:
            raise ValueError("conditioning on W needs a single shared table")
        self.VP = d.v1 if d.shared else np.vstack([d.v1, d.v2])
        self.WP = d.w1
        R1 = _stage1_r(d.v1, d.w1, p, self.measure_v, self.measure_w)
        Rp1 = _cross_r(self.VP, self.WP, d.v1, d.w1, p, self.measure_v, self.measure_w)
        Rpp = _cross_r(self.VP, self.WP, self.VP, self.WP, p, self.measure_v, self.measure_w)
        L, _ = cholesky_jitter(R1 + p.sigma2 * np.eye(d.n1))
        mf = Rp1 @ linalg.cho_solve((L, True), d.y1)
        A = linalg.solve_triangular(L, Rp1.T, lower=True)
        Rf = Rpp - A.T @ A
        self.KV = gram(self.VP, self.VP, p.kv)
        K = self.KV if self.WP is None else self.KV * gram(self.WP, self.WP, p.kw)
        KinvMf = chol_solve(K, np.column_stack([mf, Rf]), self.jitter)
        self.m_a = KinvMf[:, 0]
        Ca = chol_solve(K, KinvMf[:, 1:].T, self.jitter)
        self.C_a = 0.5 * (Ca + Ca.T)
        rV = nuclear_dominant_gram(self.VP, self.VP, p.kv, self.measure_v)
        Cb = chol_solve(self.KV, chol_solve(self.KV, rV, self.jitter).T, self.jitter)
        self.Cb0 = 0.5 * (Cb + Cb.T)
        self.KZ = gram(d.z2, d.z2, p.kz) + p.eta2 * np.eye(d.n2)
        self.K2P = gram(d.v2, self.VP, p.kv)

    def _dw(self, W, P):
        if self.WP is None:
            return np.ones((self.VP.shape[0], P))
        return gram(self.WP, W, self.params.kw)

    def from_features(self, kW, beta, khat, full_cov: bool = False):
        """Moments from ``D(w)`` columns, ``beta(z)`` columns and the ``khat`` gram.

        The covariance between points ``p, q`` is
        ``khat_pq u_p^T Cb u_q + v_p^T C_a v_q + khat_pq Tr[C_a D_p K Cb K D_q]``
        with ``u = K D m_a`` and ``v = D K m_b``.
        """
        KV = self.KV
        mz = self.K2P.T @ beta
        m_b = chol_solve(KV, mz, self.jitter)
        U = KV @ (kW * self.m_a[:, None])
        Vv = kW * (KV @ m_b)
        mean = np.einsum("ip,ip->p", kW * self.m_a[:, None], KV @ m_b)
        KCK = KV @ self.Cb0 @ KV
        t1 = khat * (U.T @ self.Cb0 @ U)
        t2 = Vv.T @ self.C_a @ Vv
        t3 = khat * (kW.T @ (self.C_a * KCK) @ kW)
        terms = [0.5 * (t + t.T) for t in (t1, t2, t3)]
        d = [np.diag(t).copy() for t in terms]
        var = d[0] + d[1] + d[2]
        if np.any(var < -NEG_VAR_TOL * np.maximum(1.0, np.abs(d[0]) + np.abs(d[1]) + np.abs(d[2]))):
            raise NumericalError("negative variance in the nuclear-dominant posterior")
        pm = PosteriorMoments(mean, np.maximum(var, 0.0), d[0], d[1], d[2])
        if full_cov:
            return pm, terms[0] + terms[1] + terms[2]
        return pm

    def moments(self, w, z, full_cov: bool = False):
        W, Z = _wz(self.params, w, z)
        P = Z.shape[0]
        kz = gram(self.data.z2, Z, self.params.kz)
        beta = chol_solve(self.KZ, kz)
        khat = gram(Z, Z, self.params.kz) - kz.T @ beta
        out = self.from_features(self._dw(W, P), beta, 0.5 * (khat + khat.T), full_cov)
        if full_cov:
            out[0].at = (W, Z)
        else:
            out.at = (W, Z)
        return out

    def averaged(self, kZ, kzz, w=None, full_cov: bool = False):
        """Moments for ``Z`` features averaged over marginal rows (single fixed ``w``)."""
        beta = chol_solve(self.KZ, kZ)
        khat = kzz - kZ.T @ beta
        G = kZ.shape[1]
        if self.WP is None:
            kW = np.ones((self.VP.shape[0], G))
        else:
            kW = np.repeat(gram(self.WP, as_points(w, self.params.kw.dim), self.params.kw), G, axis=1)
        return self.from_features(kW, beta, 0.5 * (khat + khat.T), full_cov)


def _stage1_r(V, W, p: ModelParams, mv, mw):
    R = nuclear_dominant_gram(V, V, p.kv, mv)
    if W is not None:
        R = R * nuclear_dominant_gram(W, W, p.kw, mw)
    return 0.5 * (R + R.T)


def _cross_r(V, W, V2, W2, p, mv, mw):
    R = nuclear_dominant_gram(V, V2, p.kv, mv)
    if W is not None:
        R = R * nuclear_dominant_gram(W, W2, p.kw, mw)
    return R


def _r_loglik(data: TwoStageData, p: ModelParams, mv, mw) -> float:
    C = _stage1_r(data.v1, data.w1, p, mv, mw) + p.sigma2 * np.eye(data.n1)
    L, _ = cholesky_jitter(C)
    a = linalg.solve_triangular(L, data.y1, lower=True)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * data.n1 * np.log(2 * np.pi))


def fit_bayesimp(data: TwoStageData, base: ModelParams, iters: int = 1000, lr: float = 0.1, opt_varsigma: bool = False, init: ModelParams | None = None) -> BayesImpModel:
    """Train the nuclear-dominant stage-one kernel by marginal likelihood.

    Stage-two parameters (``k_Z``, ``eta2``) are taken from ``base``. The
    measures default to ``N(mean, S)`` with ``S`` the empirical variances;
    ``opt_varsigma`` adds a log-scale of both measures to the optimized
    parameters.
    """
    mv = SpectralMeasure.from_data(np.vstack([data.v1, data.v2]))
    mw = None if data.w1 is None else SpectralMeasure.from_data(data.w1)
    start = base if init is None else init
    yv = max(float(np.var(data.y1)), 1e-8)
    kv0 = KernelParams(start.kv.lengthscales, yv)
    theta0 = [np.log(kv0.lengthscales), [np.log(kv0.amplitude)], [np.log(start.sigma2)]]
    if data.w1 is not None:
        theta0.insert(0, np.log(start.kw.lengthscales))
    if opt_varsigma:
        theta0.append([0.0])
    theta0 = np.concatenate([np.atleast_1d(t) for t in theta0])
    dw = 0 if data.w1 is None else data.w1.shape[1]
    dv = data.v1.shape[1]

    def unpack(th):
        th = np.clip(th, *_LOG_BOUNDS)
        e = np.exp(th)
        kw = None if dw == 0 else KernelParams(e[:dw], 1.0)
        kv = KernelParams(e[dw : dw + dv], e[dw + dv])
        p = replace(base, kw=kw, kv=kv, sigma2=max(e[dw + dv + 1], _NOISE_FLOOR))
        s = e[dw + dv + 2] if opt_varsigma else 1.0
        return p, mv.with_scale(s), None if mw is None else mw.with_scale(s)

    res = adam_maximize(lambda th: _r_loglik(data, *unpack(th)), theta0, iters=iters, lr=lr)
    p, mv_fit, mw_fit = unpack(res.theta)
    return BayesImpModel(data, p, mv_fit, mw_fit)


def bayesimp_moments(data, params, measure, query, w, z) -> PosteriorMoments:
    """Nuclear-dominant posterior moments for fixed hyperparameters.

    ``measure`` integrates the ``V`` kernel; the ``W`` measure (if any) is
    built from the empirical variances of ``W``.
    """
    mw = None if data.w1 is None else SpectralMeasure.from_data(data.w1)
    return BayesImpModel(data, params, measure, mw).moments(w, z)


def bayesimp_cov(model: BayesImpModel, w, z):
    """Joint mean vector and covariance matrix of the nuclear-dominant posterior."""
    pm, C = model.moments(w, z, full_cov=True)
    return pm.mean, C


# --- two-stage sampling GP ---------------------------------------------------


@dataclass
class SamplingStage2:
    """Independent GPs ``V_d = g_d(Z) + noise`` for each ``V`` dimension."""

    kernels: list
    noises: np.ndarray

    def to_dict(self):
        return {"kernels": [k.to_dict() for k in self.kernels], "noises": self.noises.tolist()}


def _gp_loglik(X, y, kp: KernelParams, noise: float) -> float:
    L, _ = cholesky_jitter(gram(X, X, kp) + noise * np.eye(X.shape[0]))
    a = linalg.solve_triangular(L, y, lower=True)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * y.size * np.log(2 * np.pi))


def fit_sampling_stage2(data: TwoStageData, iters: int = 1000, lr: float = 0.1) -> SamplingStage2:
    """Fit one GP per ``V`` dimension on ``Z`` by marginal likelihood (Adam)."""
    Z = data.z2
    dz = Z.shape[1]
    kernels, noises = [], []
    for d in range(data.v2.shape[1]):
        y = data.v2[:, d] - data.v2[:, d].mean()
        yv = max(float(np.var(y)), 1e-8)
        th0 = np.concatenate([np.log(_spread(Z)), [np.log(yv), np.log(0.1 * yv)]])

        def unpack(th):
            e = np.exp(np.clip(th, *_LOG_BOUNDS))
            return KernelParams(e[:dz], e[dz]), max(e[dz + 1], _NOISE_FLOOR)

        res = adam_maximize(lambda th: _gp_loglik(Z, y, *unpack(th)), th0, iters=iters, lr=lr)
        kp, nz = unpack(res.theta)
        kernels.append(kp)
        noises.append(nz)
    return SamplingStage2(kernels, np.asarray(noises))


def _batched_chol(C, jitter=1e-10):
    n = C.shape[-1]
    eye = np.eye(n)
    scale = np.maximum(np.einsum("...ii->...", C) / n, 1e-12)[..., None, None]
    j = 0.0
    while True:
        try:
            return np.linalg.cholesky(C + j * scale * eye)
        except np.linalg.LinAlgError:
            j = jitter if j == 0 else 10 * j
            if j > 1e-4:
                raise NumericalError("predictive covariance not positive definite") from None


def sampling_gp_effect(data: TwoStageData, params: ModelParams, query, w, z, n_samples: int, seed, stage2: SamplingStage2 | None = None, inner: int = 10):
    """Monte Carlo effect estimate by chaining two GP posterior predictives.

    For each outer draw the latent ``g(z)`` is sampled, then ``inner`` noisy
    ``V`` values around it, then a joint stage-one posterior draw of ``f``
    at those values; the inner average is one effect sample.

    Returns
    -------
    mean, variance, stderr : ndarray
        Per evaluation point; ``stderr`` is the Monte Carlo error of ``mean``.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    stage2 = fit_sampling_stage2(data) if stage2 is None else stage2
    W, Z = _wz(params, w, z)
    rng = np.random.default_rng(seed)
    n1, dv = data.n1, data.v1.shape[1]
    K1 = gram(data.v1, data.v1, params.kv)
    if data.w1 is not None:
        K1 = K1 * gram(data.w1, data.w1, params.kw)
    L1, _ = cholesky_jitter(K1 + params.sigma2 * np.eye(n1))
    coef = linalg.cho_solve((L1, True), data.y1)
    # stage-two predictive of g_d at every z (per-dimension, latent)
    gm = np.empty((Z.shape[0], dv))
    gs = np.empty((Z.shape[0], dv))
    for d, (kp, nz) in enumerate(zip(stage2.kernels, stage2.noises)):
        off = data.v2[:, d].mean()
        L2, _ = cholesky_jitter(gram(data.z2, data.z2, kp) + nz * np.eye(data.n2))
        ks = gram(data.z2, Z, kp)
        gm[:, d] = off + ks.T @ linalg.cho_solve((L2, True), data.v2[:, d] - off)
        A = linalg.solve_triangular(L2, ks, lower=True)
        gs[:, d] = np.sqrt(np.maximum(kp.amplitude - np.sum(A * A, axis=0), 0.0))
    S, M = int(n_samples), int(inner)
    means, varis = np.empty(Z.shape[0]), np.empty(Z.shape[0])
    for p in range(Z.shape[0]):
        g = gm[p] + gs[p] * rng.standard_normal((S, 1, dv))
        Vs = (g + np.sqrt(stage2.noises) * rng.standard_normal((S, M, dv))).reshape(S * M, dv)
        ks = gram(data.v1, Vs, params.kv)
        if data.w1 is not None:
            ks = ks * gram(data.w1, W[p : p + 1], params.kw)
        mu = (ks.T @ coef).reshape(S, M)
        A = linalg.solve_triangular(L1, ks, lower=True).reshape(n1, S, M)
        Vb = Vs.reshape(S, M, dv)
        diff = (Vb[:, :, None, :] - Vb[:, None, :, :]) / params.kv.lengthscales
        Kss = params.kv.amplitude * np.exp(-0.5 * np.sum(diff**2, axis=-1))
        if data.w1 is not None:
            Kss = Kss * gram(W[p : p + 1], W[p : p + 1], params.kw)[0, 0]
        C = Kss - np.einsum("isa,isb->sab", A, A)
        Lc = _batched_chol(0.5 * (C + np.swapaxes(C, 1, 2)))
        f = mu + np.einsum("sab,sb->sa", Lc, rng.standard_normal((S, M)))
        eff = f.mean(axis=1)
        means[p] = eff.mean()
        varis[p] = eff.var(ddof=1) if S > 1 else 0.0
    return means, varis, np.sqrt(varis / S)
