"""Cholesky solves, the two-stage training objectives and an Adam fitter.

Stage one regresses ``Y`` on ``(W, V)`` with the product kernel
``k_W * k_V`` and noise ``sigma2``. Stage two fits the ``Z``-kernel and noise
``eta2`` by the eigenvalue-weighted likelihood, which only needs the
``V``-gram.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import linalg

from .kernels import KernelParams, as_points, gram, tau

__all__ = [
    "NumericalError",
    "MAX_JITTER",
    "cholesky_jitter",
    "chol_solve",
    "TwoStageData",
    "ModelParams",
    "FittedModel",
    "stage1_gram",
    "log_marginal_likelihood",
    "weighted_log_marginal_likelihood",
    "fd_gradient",
    "fd_gradient_4pt",
    "AdamResult",
    "adam_maximize",
    "adam_fit",
    "default_params",
    "fit_model",
]

log = logging.getLogger(__name__)

MAX_JITTER = 1e-4


class NumericalError(RuntimeError):
    """A matrix could not be factorized even after the full jitter ladder."""


def cholesky_jitter(A, jitter: float = 0.0):
    """Lower Cholesky factor of ``A + j*I`` with an escalating jitter ``j``.

    The first attempt uses ``jitter``; on failure the jitter restarts at
    ``1e-10 * trace(A)/n`` (or ten times the previous value, whichever is
    larger) and grows by 10x per attempt up to :data:`MAX_JITTER`.

    Returns
    -------
    L : ndarray
        Lower-triangular factor.
    used : float
        The jitter that succeeded.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    if not np.all(np.isfinite(A)):
        raise NumericalError("matrix has non-finite entries")
    n = A.shape[0]
    eye = np.eye(n)
    j = float(jitter)
    base = max(1e-10 * np.trace(A) / max(n, 1), 1e-14)
    while True:
        try:
            L = linalg.cholesky(A + j * eye, lower=True, check_finite=False)
            if j > jitter:
                log.debug("cholesky needed jitter %.3g", j)
            return L, j
        except linalg.LinAlgError:
            j = max(base, 10.0 * j)
            if j > MAX_JITTER * (1 + 1e-12):
                raise NumericalError(f"matrix not positive definite after jitter {MAX_JITTER:g}") from None


def chol_solve(A, B, jitter: float = 0.0) -> np.ndarray:
    """Solve ``(A + jitter*I) X = B`` through a Cholesky factorization."""
    L, _ = cholesky_jitter(A, jitter)
    return linalg.cho_solve((L, True), np.asarray(B, dtype=float), check_finite=False)


@dataclass
class TwoStageData:
    """Arrays for the two regressions.

    ``y1, w1, v1`` feed stage one and ``v2, z2`` feed stage two. ``w1`` is
    ``None`` when the conditioning set ``W`` is empty. ``shared`` marks a
    single dataset whose stage-one and stage-two rows coincide (so
    resampling must keep rows aligned).
    """

    y1: np.ndarray
    w1: np.ndarray | None
    v1: np.ndarray
    v2: np.ndarray
    z2: np.ndarray
    shared: bool = False

    def __post_init__(self):
        self.y1 = np.asarray(self.y1, dtype=float).ravel()
        self.v1 = as_points(self.v1)
        self.w1 = None if self.w1 is None else as_points(self.w1)
        self.v2 = as_points(self.v2)
        self.z2 = as_points(self.z2)
        n1 = self.y1.size
        if self.v1.shape[0] != n1 or (self.w1 is not None and self.w1.shape[0] != n1):
            raise ValueError("stage-one arrays have inconsistent lengths")
        if self.v2.shape[0] != self.z2.shape[0]:
            raise ValueError("stage-two arrays have inconsistent lengths")
        if self.v1.shape[1] != self.v2.shape[1]:
            raise ValueError("V has different dimension in the two stages")
        if self.shared and self.v2.shape[0] != n1:
            raise ValueError("a shared dataset needs equal stage lengths")

    @property
    def n1(self) -> int:
        return self.y1.size

    @property
    def n2(self) -> int:
        return self.z2.shape[0]

    @property
    def has_w(self) -> bool:
        return self.w1 is not None

    def subset(self, idx1, idx2=None) -> "TwoStageData":
        """Rows ``idx1`` of stage one and ``idx2`` of stage two.

        For a shared dataset ``idx2`` defaults to ``idx1``.
        """
        idx1 = np.asarray(idx1)
        if idx2 is None:
            if not self.shared:
                raise ValueError("two-sample data needs separate stage indices")
            idx2 = idx1
        idx2 = np.asarray(idx2)
        return TwoStageData(
            self.y1[idx1],
            None if self.w1 is None else self.w1[idx1],
            self.v1[idx1],
            self.v2[idx2],
            self.z2[idx2],
            shared=self.shared and np.array_equal(idx1, idx2),
        )


@dataclass(frozen=True)
class ModelParams:
    """Kernel and noise hyperparameters of both stages.

    ``kw`` is ``None`` when ``W`` is empty. The amplitude of ``k_W`` is held
    at one (it is not identifiable next to the amplitude of ``k_V``).
    """

    kw: KernelParams | None
    kv: KernelParams
    kz: KernelParams
    sigma2: float
    eta2: float

    def __post_init__(self):
        if not (self.sigma2 >= 0 and self.eta2 >= 0):
            raise ValueError("noise variances must be non-negative")

    def to_dict(self) -> dict:
        return {
            "kw": None if self.kw is None else self.kw.to_dict(),
            "kv": self.kv.to_dict(),
            "kz": self.kz.to_dict(),
            "sigma2": self.sigma2,
            "eta2": self.eta2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(
            None if d.get("kw") is None else KernelParams.from_dict(d["kw"]),
            KernelParams.from_dict(d["kv"]),
            KernelParams.from_dict(d["kz"]),
            float(d["sigma2"]),
            float(d["eta2"]),
        )


def stage1_gram(data: TwoStageData, params: ModelParams) -> np.ndarray:
    """``K_WW * K_VV`` (Hadamard) on the stage-one rows; ``K_VV`` alone if W is empty."""
    K = gram(data.v1, data.v1, params.kv)
    if data.w1 is not None:
        K = K * gram(data.w1, data.w1, params.kw)
    return K


class FittedModel:
    """Data plus hyperparameters with cached stage factorizations.

    Attributes
    ----------
    data : TwoStageData
    params : ModelParams
    K1 : ndarray
        ``K_WW * K_VV`` on stage-one rows.
    L1 : ndarray
        Cholesky factor of ``K1 + sigma2*I``.
    coef : ndarray
        ``(K1 + sigma2*I)^{-1} y``.
    KZ : ndarray
        ``K_ZZ`` on stage-two rows.
    L2 : ndarray
        Cholesky factor of ``K_ZZ + eta2*I``.
    """

    def __init__(self, data: TwoStageData, params: ModelParams, jitter: float = 0.0):
        if data.has_w != (params.kw is not None):
            raise ValueError("model params and data disagree on whether W is present")
        self.data = data
        self.params = params
        self.K1 = stage1_gram(data, params)
        self.L1, self.jitter1 = cholesky_jitter(self.K1 + params.sigma2 * np.eye(data.n1), jitter)
        self.coef = linalg.cho_solve((self.L1, True), data.y1)
        self.KZ = gram(data.z2, data.z2, params.kz)
        self.L2, self.jitter2 = cholesky_jitter(self.KZ + params.eta2 * np.eye(data.n2), jitter)
        self.K21 = gram(data.v2, data.v1, params.kv)
        self.K22 = gram(data.v2, data.v2, params.kv)
        self.tau = tau(params.kv)

    def solve1(self, B) -> np.ndarray:
        return linalg.cho_solve((self.L1, True), B, check_finite=False)

    def solve2(self, B) -> np.ndarray:
        return linalg.cho_solve((self.L2, True), B, check_finite=False)

    def kw_vec(self, w) -> np.ndarray:
        """``k_W(W_i, w)`` as an ``(n1, P)`` matrix (all ones when W is empty)."""
        if self.params.kw is None:
            P = 1 if w is None else np.atleast_2d(w).shape[0]
            return np.ones((self.data.n1, P))
        return gram(self.data.w1, as_points(w, self.params.kw.dim), self.params.kw)

    def kz_vec(self, z) -> np.ndarray:
        return gram(self.data.z2, as_points(z, self.params.kz.dim), self.params.kz)


def _logdet_from_chol(L) -> float:
    return 2.0 * np.sum(np.log(np.diag(L)))


def log_marginal_likelihood(data: TwoStageData, params: ModelParams, jitter: float = 0.0) -> float:
    """``log N(y | 0, K_WW * K_VV + sigma2*I)`` on the stage-one rows."""
    n = data.n1
    C = stage1_gram(data, params) + params.sigma2 * np.eye(n)
    L, _ = cholesky_jitter(C, jitter)
    a = linalg.solve_triangular(L, data.y1, lower=True, check_finite=False)
    return float(-0.5 * a @ a - 0.5 * _logdet_from_chol(L) - 0.5 * n * np.log(2 * np.pi))


def weighted_log_marginal_likelihood(data: TwoStageData, params: ModelParams, jitter: float = 0.0) -> float:
    """Eigenvalue-weighted stage-two likelihood.

    ``sum_i lambda_i log N(phi_i | 0, K_ZZ + eta2*I)``, which collapses to
    ``-(tau n/2) log 2pi - (tau/2) log|K_ZZ + eta2 I| - 1/2 Tr[(K_ZZ + eta2 I)^{-1} K_VV]``
    since ``sum_i lambda_i phi_i phi_i^T = K_VV``.
    """
    n = data.n2
    t = tau(params.kv)
    C = gram(data.z2, data.z2, params.kz) + params.eta2 * np.eye(n)
    L, _ = cholesky_jitter(C, jitter)
    KV = gram(data.v2, data.v2, params.kv)
    M = linalg.solve_triangular(L, KV, lower=True, check_finite=False)
    M = linalg.solve_triangular(L, M.T, lower=True, check_finite=False)
    trace = np.trace(M)
    return float(-0.5 * t * n * np.log(2 * np.pi) - 0.5 * t * _logdet_from_chol(L) - 0.5 * trace)


# --- parameter packing -----------------------------------------------------

_LOG_BOUNDS = (-9.0, 9.0)
_NOISE_FLOOR = 1e-6


def _pack(params: ModelParams, stage: str) -> np.ndarray:
    if stage == "stage1":
        parts = [] if params.kw is None else [np.log(params.kw.lengthscales)]
        parts += [np.log(params.kv.lengthscales), [np.log(params.kv.amplitude)], [np.log(params.sigma2)]]
    elif stage == "stage2":
        parts = [np.log(params.kz.lengthscales), [np.log(params.kz.amplitude)], [np.log(params.eta2)]]
    else:
        raise ValueError(f"unknown objective {stage!r}")
    return np.concatenate([np.atleast_1d(p) for p in parts])


def _unpack(theta: np.ndarray, template: ModelParams, stage: str) -> ModelParams:
    theta = np.clip(theta, *_LOG_BOUNDS)
    e = np.exp(theta)
    if stage == "stage1":
        i = 0
        kw = None
        if template.kw is not None:
            dw = template.kw.dim
            kw = KernelParams(e[:dw], 1.0)
            i = dw
        dv = template.kv.dim
        kv = KernelParams(e[i : i + dv], e[i + dv])
        return replace(template, kw=kw, kv=kv, sigma2=max(e[i + dv + 1], _NOISE_FLOOR))
    dz = template.kz.dim
    kz = KernelParams(e[:dz], e[dz])
    return replace(template, kz=kz, eta2=max(e[dz + 1], _NOISE_FLOOR))


def fd_gradient(f: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient (two evaluations per coordinate)."""
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        g[i] = (f(theta + e) - f(theta - e)) / (2 * step)
    return g


def fd_gradient_4pt(f: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Fourth-order five-point stencil, used to cross-check :func:`fd_gradient`."""
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        g[i] = (-f(theta + 2 * e) + 8 * f(theta + e) - 8 * f(theta - e) + f(theta - 2 * e)) / (12 * step)
    return g


@dataclass
class AdamResult:
    theta: np.ndarray
    value: float
    init_value: float
    trace: list[float] = field(default_factory=list)
    best_trace: list[float] = field(default_factory=list)


def adam_maximize(
    f: Callable[[np.ndarray], float],
    theta0,
    iters: int = 1000,
    lr: float = 0.1,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
    step: float = 1e-4,
    grad_tol: float = 1e-10,
) -> AdamResult:
    """Maximize ``f`` with Adam on finite-difference gradients.

    The best point visited is returned, so the result never scores below
    the start. Evaluations that raise :class:`NumericalError` count as
    ``-inf`` and are never accepted as best.
    """

    def safe(th):
        try:
            v = f(th)
        except NumericalError:
            return -np.inf
        return v if np.isfinite(v) else -np.inf

    theta = np.array(theta0, dtype=float)
    v0 = safe(theta)
    if not np.isfinite(v0):
        raise NumericalError("objective is not finite at the initial parameters")
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    best_theta, best = theta.copy(), v0
    res = AdamResult(best_theta, best, v0, [v0], [v0])
    b1, b2 = betas
    for t in range(1, iters + 1):
        g = fd_gradient(safe, theta, step)
        if not np.all(np.isfinite(g)):
            g = np.nan_to_num(g, nan=0.0, posinf=0.0, neginf=0.0)
        if np.max(np.abs(g)) < grad_tol:
            break
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        shat = s / (1 - b2**t)
        theta = np.clip(theta + lr * mhat / (np.sqrt(shat) + eps), *_LOG_BOUNDS)
        v = safe(theta)
        res.trace.append(v)
        if v > best:
            best, best_theta = v, theta.copy()
        res.best_trace.append(best)
    res.theta, res.value = best_theta, best
    return res


def adam_fit(objective: str, data: TwoStageData, init: ModelParams, iters: int = 1000, lr: float = 0.1):
    """Fit one stage's hyperparameters by Adam in log-parameter space.

    Parameters
    ----------
    objective : {"stage1", "stage2"}
        ``"stage1"`` maximizes :func:`log_marginal_likelihood` over the
        ``W``/``V`` lengthscales, ``V`` amplitude and ``sigma2``;
        ``"stage2"`` maximizes :func:`weighted_log_marginal_likelihood` over
        the ``Z`` lengthscales and amplitude and ``eta2``.

    Returns
    -------
    params : ModelParams
    result : AdamResult
        Holds the per-iteration objective and best-so-far traces.
    """
    obj = log_marginal_likelihood if objective == "stage1" else weighted_log_marginal_likelihood
    if objective not in ("stage1", "stage2"):
        raise ValueError(f"unknown objective {objective!r}")

    def f(theta):
        return obj(data, _unpack(theta, init, objective))

    res = adam_maximize(f, _pack(init, objective), iters=iters, lr=lr)
    return _unpack(res.theta, init, objective), res


def _spread(X) -> np.ndarray:
    X = as_points(X)
    s = X.std(axis=0) if X.shape[0] > 1 else np.ones(X.shape[1])
    return np.where(s > 1e-8, s, 1.0)


def default_params(data: TwoStageData) -> ModelParams:
    """Data-scaled starting point for :func:`fit_model`."""
    yv = float(np.var(data.y1)) if data.n1 > 1 else 1.0
    yv = yv if yv > 1e-8 else 1.0
    kw = None if data.w1 is None else KernelParams(_spread(data.w1))
    kv = KernelParams(_spread(np.vstack([data.v1, data.v2])), yv)
    kz = KernelParams(_spread(data.z2), 1.0)
    return ModelParams(kw, kv, kz, sigma2=0.1 * yv, eta2=0.1)


def fit_model(data: TwoStageData, init: ModelParams | None = None, iters: int = 1000, lr: float = 0.1) -> FittedModel:
    """Train both stages (stage one first, since stage two needs ``k_V``)."""
    params = default_params(data) if init is None else init
    params, _ = adam_fit("stage1", data, params, iters, lr)
    params, _ = adam_fit("stage2", data, params, iters, lr)
    return FittedModel(data, params)
