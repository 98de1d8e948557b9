"""Choosing the integrating measure by bootstrap coverage, and coverage profiles.

The calibration error of a measure is estimated by sample splitting: half
``B`` of the data gives a point estimate of the effect, and intervals built
from bootstrap resamples of half ``A`` are scored on how often they cover it
at each nominal level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .gp import FittedModel, ModelParams, NumericalError, TwoStageData
from .kernels import SpectralMeasure
from .posterior import posterior_batch

__all__ = [
    "DEFAULT_ALPHAS",
    "PROFILE_ALPHAS",
    "DEFAULT_OMEGAS",
    "CalibrationGrid",
    "CoverageProfile",
    "frozen_builder",
    "split_halves",
    "calibration_error",
    "optimize_spectral_measure",
    "coverage_indicators",
    "coverage_profile",
]

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = np.linspace(0, 1, 101)[1:-1]
PROFILE_ALPHAS = (np.arange(100) + 0.5) / 100
DEFAULT_OMEGAS = 2.0 ** np.array([-4, -2, 0, 2, 4])
FAILURE_BUDGET = 0.10


@dataclass
class CalibrationGrid:
    """Nominal levels, evaluation points and candidate measure scales.

    ``w`` is ``None`` for models without ``W``; otherwise it has one row per
    evaluation point (or a single row broadcast across ``z``).
    """

    alphas: np.ndarray = field(default_factory=lambda: DEFAULT_ALPHAS.copy())
    z: np.ndarray | None = None
    w: np.ndarray | None = None
    omega_candidates: np.ndarray = field(default_factory=lambda: DEFAULT_OMEGAS.copy())

    def __post_init__(self):
        self.alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        if self.alphas.size == 0 or np.any(np.diff(self.alphas) <= 0):
            raise ValueError("alphas must be non-empty and strictly increasing")
        if np.any((self.alphas <= 0) | (self.alphas >= 1)):
            raise ValueError("alphas must lie in (0, 1)")
        if self.z is None or np.size(self.z) == 0:
            raise ValueError("evaluation points are required")
        self.omega_candidates = np.atleast_1d(np.asarray(self.omega_candidates, dtype=float))
        if self.omega_candidates.size == 0 or np.any(self.omega_candidates <= 0):
            raise ValueError("omega candidates must be positive and non-empty")


def frozen_builder(params: ModelParams, jitter: float = 0.0) -> Callable[[TwoStageData], FittedModel]:
    """Model builder that reuses fixed hyperparameters on any data."""

    def build(data: TwoStageData) -> FittedModel:
        return FittedModel(data, params, jitter)

    return build


def split_halves(data: TwoStageData, rng):
    """Random 50:50 split of each table; returns ``(idx_A, idx_B)`` pairs per stage."""
    p1 = rng.permutation(data.n1)
    h1 = data.n1 // 2
    a1, b1 = np.sort(p1[:h1]), np.sort(p1[h1:])
    if data.shared:
        return (a1, a1), (b1, b1)
    p2 = rng.permutation(data.n2)
    h2 = data.n2 // 2
    return (a1, np.sort(p2[:h2])), (b1, np.sort(p2[h2:]))


def _resample(idx, rng):
    return idx[rng.integers(0, idx.size, idx.size)]


def _plan(data: TwoStageData, n_boot: int, seed):
    """Split and bootstrap indices; shared by every candidate for a paired comparison."""
    rng = np.random.default_rng(seed)
    (a1, a2), (b1, b2) = split_halves(data, rng)
    if np.intersect1d(a1, b1).size or np.intersect1d(a2, b2).size:
        raise AssertionError("sample halves overlap")
    boots = []
    for _ in range(n_boot):
        r1 = _resample(a1, rng)
        r2 = r1 if data.shared else _resample(a2, rng)
        boots.append((r1, r2))
    return (a1, a2), (b1, b2), boots


def _subset(data, i1, i2):
    if data.shared:
        return data.subset(i1)
    return data.subset(i1, i2)


def coverage_indicators(mean, var, target, alphas) -> np.ndarray:
    """``|target - mean| <= z_{(1+a)/2} sd`` as an ``(len(alphas), P)`` boolean array."""
    half = stats.norm.ppf(0.5 * (1 + np.asarray(alphas)))[:, None] * np.sqrt(np.maximum(var, 0.0))[None, :]
    return np.abs(np.asarray(target) - np.asarray(mean))[None, :] <= half


def _posterior(model, measure, w, z):
    pm = posterior_batch(model, measure, w, z)
    return pm.mean, pm.variance


def _boot_moments(data, builder, boots, measures, w, z, moments_fn):
    """Posterior moments of every bootstrap replicate under every measure."""
    out = {k: [] for k in range(len(measures))}
    failures = 0
    for r1, r2 in boots:
        try:
            model = builder(_subset(data, r1, r2))
            res = [moments_fn(model, m, w, z) for m in measures]
        except NumericalError as e:
            failures += 1
            log.warning("bootstrap replicate failed: %s", e)
            continue
        for k, mv in enumerate(res):
            out[k].append(mv)
    if failures > FAILURE_BUDGET * len(boots):
        raise NumericalError(f"{failures} of {len(boots)} bootstrap replicates failed")
    return out


def _errors(data, builder, measures, grid: CalibrationGrid, n_boot, seed, moments_fn=None):
    if n_boot < 1:
        raise ValueError("n_boot must be at least 1")
    moments_fn = _posterior if moments_fn is None else moments_fn
    _, (b1, b2), boots = _plan(data, n_boot, seed)
    target = moments_fn(builder(_subset(data, b1, b2)), measures[0], grid.w, grid.z)[0]
    res = _boot_moments(data, builder, boots, measures, grid.w, grid.z, moments_fn)
    errs = []
    for k in range(len(measures)):
        cov = np.mean([coverage_indicators(m, v, target, grid.alphas) for m, v in res[k]], axis=0)
        errs.append(float(np.mean(np.abs(cov - grid.alphas[:, None]))))
    return np.asarray(errs)


def _as_data(dataset) -> TwoStageData:
    return dataset if isinstance(dataset, TwoStageData) else dataset.to_arrays()


def calibration_error(model_builder, dataset, measure_candidate: SpectralMeasure, grid: CalibrationGrid, n_boot: int = 20, seed=0, moments_fn=None) -> float:
    """Mean over levels and points of ``|coverage - alpha|`` for one measure.

    The point estimate comes from half ``B``; coverage is the fraction of
    bootstrap resamples of half ``A`` whose central interval contains it.
    Hyperparameters are whatever ``model_builder`` uses (frozen by
    default). Replicates that fail numerically are skipped, up to 10%.
    ``moments_fn(model, measure, w, z) -> (mean, variance)`` overrides the
    interval construction (closed-form posterior by default).
    """
    data = _as_data(dataset)
    return float(_errors(data, model_builder, [measure_candidate], grid, n_boot, seed, moments_fn)[0])


def _pick(omegas, errs):
    order = sorted(range(len(omegas)), key=lambda i: (round(errs[i], 12), abs(np.log(omegas[i])), omegas[i]))
    return order[0]


def optimize_spectral_measure(model_builder, dataset, grid: CalibrationGrid, omega_candidates=None, n_boot: int = 20, seed=0, base: SpectralMeasure | None = None, return_errors: bool = False, moments_fn=None):
    """Scale of the integrating measure with the smallest calibration error.

    All candidates share one split and one set of bootstrap resamples. Ties
    go to the scale closest to one (in log scale).

    Parameters
    ----------
    base : SpectralMeasure, optional
        Reference measure whose scale is replaced by each candidate; by
        default built from the empirical mean and variances of ``V``.
    """
    data = _as_data(dataset)
    omegas = grid.omega_candidates if omega_candidates is None else np.atleast_1d(np.asarray(omega_candidates, dtype=float))
    if omegas.size == 0:
        raise ValueError("at least one candidate is required")
    if base is None:
        V = data.v1 if data.shared else np.vstack([data.v1, data.v2])
        base = SpectralMeasure.from_data(V)
    measures = [base.with_scale(float(o)) for o in omegas]
    if omegas.size == 1:
        errs = np.array([np.nan])
        best = 0
    else:
        errs = _errors(data, model_builder, measures, grid, n_boot, seed, moments_fn)
        best = _pick(list(omegas), list(errs))
    if return_errors:
        return measures[best], dict(zip(omegas.tolist(), errs.tolist()))
    return measures[best]


@dataclass
class CoverageProfile:
    """Coverage against ground truth across repeated trials.

    Attributes
    ----------
    alphas : ndarray (A,)
    coverage : ndarray (A,)
        Coverage averaged over evaluation points.
    abs_error : ndarray (A,)
        ``|coverage - alpha|`` taken per point, then averaged over points.
    point_coverage : ndarray (A, P)
    band_lo, band_hi : ndarray (A,)
        Percentile bootstrap band (over trials) for ``abs_error``.
    """

    alphas: np.ndarray
    coverage: np.ndarray
    abs_error: np.ndarray
    point_coverage: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray

    @property
    def calibration_error(self) -> float:
        return float(np.mean(self.abs_error))


def coverage_profile(trial_results, true_effect_oracle, alphas=None, n_outer_boot: int = 100, seed=0, points=None) -> CoverageProfile:
    """Coverage of credible intervals across trials.

    Parameters
    ----------
    trial_results : sequence of (mean, variance) array pairs, or objects with
        ``mean`` and ``variance``
    true_effect_oracle : array_like or callable
        True effect at the evaluation points (or a function of ``points``).
    """
    alphas = PROFILE_ALPHAS if alphas is None else np.asarray(alphas, dtype=float)
    if len(trial_results) < 2:
        raise ValueError("a coverage profile needs at least two trials")
    truth = true_effect_oracle(points) if callable(true_effect_oracle) else true_effect_oracle
    truth = np.asarray(truth, dtype=float)
    if not np.all(np.isfinite(truth)):
        raise ValueError("oracle has missing values")
    ind = []
    for r in trial_results:
        m, v = (r.mean, r.variance) if hasattr(r, "mean") else r
        m, v = np.asarray(m, dtype=float), np.asarray(v, dtype=float)
        if m.shape != truth.shape:
            raise ValueError("trial results and oracle have different lengths")
        ind.append(coverage_indicators(m, v, truth, alphas))
    ind = np.asarray(ind, dtype=float)  # (T, A, P)

    def profile(I):
        cov_p = I.mean(axis=0)
        return cov_p, np.mean(np.abs(cov_p - alphas[:, None]), axis=1)

    cov_p, err = profile(ind)
    rng = np.random.default_rng(seed)
    T = ind.shape[0]
    boots = np.array([profile(ind[rng.integers(0, T, T)])[1] for _ in range(n_outer_boot)])
    lo, hi = np.percentile(boots, [2.5, 97.5], axis=0) if n_outer_boot > 0 else (err, err)
    return CoverageProfile(alphas, cov_p.mean(axis=1), err, cov_p, lo, hi)
