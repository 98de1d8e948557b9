"""Gaussian kernels, gram matrices and measure-smoothed grams.

Every kernel in the package is the anisotropic Gaussian

    k(x, x') = a * exp(-sum_d (x_d - x'_d)**2 / (2 * l_d**2))

and every integrating measure is a Gaussian with diagonal covariance, so the
smoothed gram ``int k(x, t) k(t, x') dmu(t)`` has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "KernelParams",
    "SpectralMeasure",
    "as_points",
    "gram",
    "smoothed_gram",
    "nuclear_dominant_gram",
    "tau",
]


def as_points(X, dim: int | None = None) -> np.ndarray:
    """Coerce ``X`` into a float ``(n, d)`` array.

    One-dimensional input is read as ``n`` points in one dimension unless
    ``dim`` says otherwise (then it is a single point).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(1, -1) if dim is not None and dim > 1 and X.size == dim else X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected a point set of rank <= 2, got shape {X.shape}")
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"point dimension {X.shape[1]} does not match kernel dimension {dim}")
    if not np.all(np.isfinite(X)):
        raise ValueError("point set contains non-finite entries")
    return X


@dataclass(frozen=True)
class KernelParams:
    """Lengthscales (one per input dimension) and output amplitude."""

    lengthscales: np.ndarray
    amplitude: float = 1.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "amplitude", float(self.amplitude))
        if ls.ndim != 1 or ls.size == 0:
            raise ValueError("lengthscales must be a non-empty vector")
        if not np.all(ls > 0) or not np.all(np.isfinite(ls)):
            raise ValueError(f"lengthscales must be positive and finite, got {ls}")
        if not (self.amplitude > 0 and np.isfinite(self.amplitude)):
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def to_dict(self) -> dict:
        return {"lengthscales": self.lengthscales.tolist(), "amplitude": self.amplitude}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelParams":
        return cls(np.asarray(d["lengthscales"], dtype=float), d.get("amplitude", 1.0))


@dataclass(frozen=True)
class SpectralMeasure:
    """Gaussian integrating measure ``N(mean, scale * diag(base))``.

    ``base`` holds the diagonal of the reference matrix. By default it is
    built from empirical variances so that ``scale = 1`` reproduces the
    empirical (diagonal) covariance of the data; ``base="std"`` in
    :meth:`from_data` uses standard deviations instead.
    """

    mean: np.ndarray
    scale: float = 1.0
    base: np.ndarray = field(default=None)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        base = np.ones_like(mean) if self.base is None else np.atleast_1d(np.asarray(self.base, dtype=float)).copy()
        if base.shape != mean.shape:
            raise ValueError("measure mean and base must have the same dimension")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"measure scale must be positive, got {self.scale}")
        if not np.all(base > 0):
            raise ValueError("measure base must be positive definite")
        mean.setflags(write=False)
        base.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def from_data(cls, V, scale: float = 1.0, base: str = "var") -> "SpectralMeasure":
        V = as_points(V)
        if base == "var":
            b = V.var(axis=0, ddof=1) if V.shape[0] > 1 else np.ones(V.shape[1])
        elif base == "std":
            b = V.std(axis=0, ddof=1) if V.shape[0] > 1 else np.ones(V.shape[1])
        else:
            raise ValueError(f"unknown base {base!r}; use 'var' or 'std'")
        b = np.where(b > 0, b, 1.0)
        return cls(V.mean(axis=0), scale, b)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def variances(self) -> np.ndarray:
        return self.scale * self.base

    def with_scale(self, scale: float) -> "SpectralMeasure":
        return replace(self, scale=scale)

    def sample(self, size: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        return self.mean + np.sqrt(self.variances) * rng.standard_normal((size, self.dim))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale, "base": self.base.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SpectralMeasure":
        return cls(np.asarray(d["mean"]), d["scale"], np.asarray(d["base"]))


def _sqdist(X, X2, ls):
    A = X / ls
    B = X2 / ls
    d2 = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def gram(X, X2, params: KernelParams) -> np.ndarray:
    """Kernel matrix with entries ``k(X[i], X2[j])``."""
    X = as_points(X, params.dim)
    X2 = as_points(X2, params.dim)
    K = params.amplitude * np.exp(-0.5 * _sqdist(X, X2, params.lengthscales))
    if X2 is X or (X.shape == X2.shape and np.array_equal(X, X2)):
        K = 0.5 * (K + K.T)
    return K


def _gauss_conv(X, X2, params: KernelParams, measure: SpectralMeasure) -> np.ndarray:
    # per dimension: exp(-(x-x')^2/(4l^2)) * l/sqrt(l^2+2s^2) * exp(-(xbar-m)^2/(l^2+2s^2))
    l2 = params.lengthscales**2
    s2 = measure.variances
    c = l2 + 2.0 * s2
    logK = -0.25 * _sqdist(X, X2, params.lengthscales)
    Xc = (X - measure.mean) / np.sqrt(c)
    X2c = (X2 - measure.mean) / np.sqrt(c)
    # (xbar - m)^2 / c summed over d, with xbar = (x + x') / 2
    mid = 0.25 * ((Xc**2).sum(1)[:, None] + (X2c**2).sum(1)[None, :] + 2.0 * Xc @ X2c.T)
    logK -= np.maximum(mid, 0.0)
    pref = params.amplitude**2 * np.prod(np.sqrt(l2 / c))
    return pref * np.exp(logK)


def nuclear_dominant_gram(X, X2, params: KernelParams, measure: SpectralMeasure) -> np.ndarray:
    """Cross gram of ``r(x, x') = int k(x, t) k(t, x') dmu(t)`` in closed form."""
    X = as_points(X, params.dim)
    X2 = as_points(X2, params.dim)
    if measure.dim != params.dim:
        raise ValueError("measure dimension does not match kernel dimension")
    return _gauss_conv(X, X2, params, measure)


def smoothed_gram(V, params: KernelParams, measure: SpectralMeasure, mc_samples="closed_form", seed=None) -> np.ndarray:
    """The measure-smoothed gram ``int k(V_i, t) k(t, V_j) dmu(t)``.

    Parameters
    ----------
    V : array_like, shape (n, d)
    params : KernelParams
    measure : SpectralMeasure
    mc_samples : int or "closed_form"
        ``"closed_form"`` uses the Gaussian-Gaussian convolution; an integer
        averages over that many seeded draws from the measure.
    seed : int, optional
        Required for the Monte Carlo path.
    """
    V = as_points(V, params.dim)
    if measure.dim != params.dim:
        raise ValueError("measure dimension does not match kernel dimension")
    if isinstance(mc_samples, str):
        if mc_samples != "closed_form":
            raise ValueError(f"unknown mc_samples option {mc_samples!r}")
        K = _gauss_conv(V, V, params, measure)
        return 0.5 * (K + K.T)
    m = int(mc_samples)
    if m <= 0:
        raise ValueError("mc_samples must be positive for the Monte Carlo path")
    if seed is None:
        raise ValueError("the Monte Carlo path needs an explicit seed")
    rng = np.random.default_rng(seed)
    n = V.shape[0]
    acc = np.zeros((n, n))
    chunk = max(1, min(m, 2_000_000 // max(n, 1)))
    done = 0
    while done < m:
        b = min(chunk, m - done)
        T = measure.sample(b, rng)
        KT = gram(V, T, params)
        acc += KT @ KT.T
        done += b
    K = acc / m
    return 0.5 * (K + K.T)


def tau(params: KernelParams) -> float:
    """Eigenvalue sum of a translation-invariant kernel, ``k(0, 0)``."""
    return params.amplitude
