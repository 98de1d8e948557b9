"""Data-generating processes with Monte Carlo ground truth.

Three structural models are provided:

``ablation``
    ``Z ~ U(0,1)``, ``X_d | Z ~ N(sin(a_d Z), s_d^2)`` for five dimensions and
    ``Y | X ~ N(b^T sin(X), s_y^2)``, noise scales chosen for a 2:1 signal to
    noise ratio. Two independent tables ``(Y, X)`` and ``(X, Z)``.
``synthetic``
    The nine-variable confounded graph over ``A..E`` with ``U1, U2`` hidden.
    One table.
``healthcare``
    Age, BMI, aspirin, statin, cancer and PSA, then prostate volume linear in
    PSA with noise set for a fixed R^2. Two independent tables
    ``(PSA, VOL)`` and ``(age, bmi, aspirin, statin, cancer, PSA)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .data import Dataset

__all__ = [
    "DGPS",
    "ABLATION_ALPHA",
    "ABLATION_BETA",
    "DgpSpec",
    "simulate",
    "oracle_effect",
    "ablation_noise",
    "ablation_oracle_exact",
    "healthcare_vol_noise",
    "default_roles",
]

DGPS = ("ablation", "synthetic", "healthcare")
ABLATION_ALPHA = 10.0 * np.array([1.0, 1.75, 2.5, 3.25, 4.0])
ABLATION_BETA = 1.0 / np.arange(1, 6)
SNR = 2.0
HEALTH_R2 = 0.13
HEALTH_SLOPE = 1.0
_DEFAULT_ESTIMAND = {"ablation": "ATE", "synthetic": "CATE_backdoor", "healthcare": "ATE"}


@dataclass(frozen=True)
class DgpSpec:
    """What to simulate.

    Parameters
    ----------
    name : {"ablation", "synthetic", "healthcare"}
    n : int
        Rows per table.
    seed : int
    interventions : dict
        Column name -> fixed value, applied in the structural equations
        (downstream variables respond, upstream ones do not).
    estimand : str, optional
        Selects the role map; defaults per model.
    binary : bool
        Healthcare only: draw aspirin/statin/cancer as Bernoulli instead of
        using the logistic probabilities as values.
    condition : float
        Value of the conditioning variable ``B`` for the synthetic estimands.
    """

    name: str
    n: int = 100
    seed: int = 0
    interventions: dict = field(default_factory=dict)
    estimand: str | None = None
    binary: bool = False
    condition: float = 0.0

    def __post_init__(self):
        if self.name not in DGPS:
            raise ValueError(f"unknown DGP {self.name!r}; choose from {DGPS}")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        est = self.estimand or _DEFAULT_ESTIMAND[self.name]
        allowed = {"ablation": ("ATE",), "synthetic": ("CATE_backdoor", "ATT_frontdoor"), "healthcare": ("ATE",)}
        if est not in allowed[self.name]:
            raise ValueError(f"estimand {est!r} is not identified for {self.name}")
        object.__setattr__(self, "estimand", est)


def default_roles(name: str, estimand: str | None = None) -> dict:
    est = estimand or _DEFAULT_ESTIMAND[name]
    if name == "ablation":
        xs = [f"x{d}" for d in range(1, 6)]
        return {"Y": ["y"], "W": [], "V": xs, "Z": ["z"]}
    if name == "synthetic":
        if est == "CATE_backdoor":
            return {"Y": ["y"], "W": ["d", "b"], "V": ["c"], "Z": ["b"]}
        return {"Y": ["y"], "W": ["b"], "V": ["c"], "Z": ["b"]}
    return {"Y": ["vol"], "W": [], "V": ["psa"], "Z": ["statin", "age", "bmi"]}


# --- ablation ----------------------------------------------------------------


def ablation_noise():
    """Per-dimension ``s_d^2`` and outcome ``s_y^2`` giving a 2:1 signal to noise ratio.

    ``Var(sin(a Z))`` for ``Z ~ U(0,1)`` is exact:
    ``E sin = (1 - cos a)/a`` and ``E sin^2 = 1/2 - sin(2a)/(4a)``. The
    outcome signal variance has no closed form and uses a fixed-seed
    ``10^6``-draw Monte Carlo estimate.
    """
    return _ablation_noise()


@lru_cache(maxsize=1)
def _ablation_noise():
    a = ABLATION_ALPHA
    m1 = (1 - np.cos(a)) / a
    m2 = 0.5 - np.sin(2 * a) / (4 * a)
    s2 = (m2 - m1**2) / SNR
    rng = np.random.default_rng(20240101)
    z = rng.uniform(0, 1, 1_000_000)
    x = np.sin(np.outer(z, a)) + rng.standard_normal((z.size, 5)) * np.sqrt(s2)
    sy2 = np.var(np.sin(x) @ ABLATION_BETA) / SNR
    return s2, float(sy2)


def _ablation_rows(rng, n, interventions):
    s2, sy2 = ablation_noise()
    z = interventions.get("z")
    z = rng.uniform(0, 1, n) if z is None else np.full(n, float(z))
    x = np.sin(np.outer(z, ABLATION_ALPHA)) + rng.standard_normal((n, 5)) * np.sqrt(s2)
    for d in range(5):
        if f"x{d + 1}" in interventions:
            x[:, d] = interventions[f"x{d + 1}"]
    y = np.sin(x) @ ABLATION_BETA + rng.standard_normal(n) * np.sqrt(sy2)
    if "y" in interventions:
        y[:] = interventions["y"]
    cols = {"z": z, "y": y}
    cols.update({f"x{d + 1}": x[:, d] for d in range(5)})
    return cols


def ablation_oracle_exact(z) -> np.ndarray:
    """``E[Y | do(Z=z)] = sum_d b_d sin(sin(a_d z)) exp(-s_d^2/2)`` in closed form."""
    s2, _ = ablation_noise()
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return (np.sin(np.sin(np.outer(z, ABLATION_ALPHA))) * np.exp(-s2 / 2)) @ ABLATION_BETA


# --- synthetic ---------------------------------------------------------------


def _synthetic_rows(rng, n, iv):
    e = rng.standard_normal((9, n))
    u1, u2, f = e[0], e[1], e[2]

    def val(name, default):
        return np.full(n, float(iv[name])) if name in iv else default

    a = val("a", f**2 + u1 + e[3])
    b = val("b", u2 + e[4])
    c = val("c", np.exp(-b) + e[5])
    d = val("d", np.exp(-c) / 10 + e[6])
    ee = val("e", np.cos(a) + c / 10 + e[7])
    y = val("y", np.cos(d) + np.sin(ee) + u1 + u2 + e[8])
    return {"a": a, "b": b, "c": c, "d": d, "e": ee, "y": y}


# --- healthcare --------------------------------------------------------------


def _health_d1(rng, n, iv, binary):
    def val(name, default):
        return np.full(n, float(iv[name])) if name in iv else default

    def draw(p):
        return (rng.uniform(size=n) < p).astype(float) if binary else p

    age = val("age", rng.uniform(15, 75, n))
    bmi = val("bmi", 27 - 0.01 * age + 0.7 * rng.standard_normal(n))
    aspirin = val("aspirin", draw(expit(-8.0 + 0.1 * age + 0.03 * bmi)))
    statin = val("statin", draw(expit(-13 + 0.1 * age + 0.2 * bmi)))
    cancer = val("cancer", draw(expit(2.2 - 0.05 * age + 0.01 * bmi - 0.04 * statin + 0.02 * aspirin)))
    mean = 6.8 + 0.04 * age - 0.15 * bmi - 0.6 * statin + 0.55 * aspirin + cancer
    psa = val("psa", mean + 0.4 * rng.standard_normal(n))
    return {"age": age, "bmi": bmi, "aspirin": aspirin, "statin": statin, "cancer": cancer, "psa": psa}


def healthcare_vol_noise(binary: bool = False) -> float:
    """Noise variance of ``VOL = slope * PSA + U`` giving the target R^2 against simulated PSA."""
    return _health_noise(bool(binary))


@lru_cache(maxsize=2)
def _health_noise(binary):
    rng = np.random.default_rng(20240102)
    psa = _health_d1(rng, 1_000_000, {}, binary)["psa"]
    signal = HEALTH_SLOPE**2 * np.var(psa)
    return float(signal * (1 - HEALTH_R2) / HEALTH_R2)


def _vol(rng, psa, iv, binary):
    n = psa.size
    if "vol" in iv:
        return np.full(n, float(iv["vol"]))
    return HEALTH_SLOPE * psa + np.sqrt(healthcare_vol_noise(binary)) * rng.standard_normal(n)


# --- public ------------------------------------------------------------------


def simulate(spec: DgpSpec) -> Dataset:
    """Seeded draw from the named model, with roles set for ``spec.estimand``.

    Two-table models draw the tables from independent child seeds.
    """
    roles = default_roles(spec.name, spec.estimand)
    s1, s2 = np.random.SeedSequence(spec.seed).spawn(2)
    r1, r2 = np.random.default_rng(s1), np.random.default_rng(s2)
    iv = dict(spec.interventions)
    meta = {"dgp": spec.name, "n": spec.n, "seed": spec.seed, "estimand": spec.estimand}
    if spec.name == "ablation":
        a = _ablation_rows(r1, spec.n, iv)
        b = _ablation_rows(r2, spec.n, iv)
        xs = [f"x{d}" for d in range(1, 6)]
        t1 = {"y": a["y"], **{k: a[k] for k in xs}}
        t2 = {**{k: b[k] for k in xs}, "z": b["z"]}
        return Dataset(t1, roles, t2, meta)
    if spec.name == "synthetic":
        return Dataset(_synthetic_rows(r1, spec.n, iv), roles, None, meta)
    meta["binary"] = spec.binary
    d1 = _health_d1(r1, spec.n, iv, spec.binary)
    d2 = _health_d1(r2, spec.n, iv, spec.binary)
    t1 = {"psa": d2["psa"], "vol": _vol(r2, d2["psa"], iv, spec.binary)}
    return Dataset(t1, roles, d1, meta)


def oracle_effect(spec: DgpSpec, estimand: str | None = None, values=None, n_mc: int | None = 100_000, seed=None, return_se: bool = False):
    """Monte Carlo ground truth on a grid of intervention values.

    ``values`` are ``z`` (ablation), ``d`` (synthetic back-door CATE at
    ``B = condition``), ``b`` (synthetic front-door ATT with ``B' = condition``)
    or statin levels (healthcare). Common random numbers are shared across
    grid points. ``values=None`` for healthcare returns the observational
    ``E[VOL]`` (no intervention). ``n_mc=None`` selects the closed form where
    one exists (ablation only).

    Returns
    -------
    ndarray of effects, plus Monte Carlo standard errors when ``return_se``.
    """
    est = estimand or spec.estimand
    if est != spec.estimand:
        spec = DgpSpec(spec.name, spec.n, spec.seed, spec.interventions, est, spec.binary, spec.condition)
    rng = np.random.default_rng(spec.seed + 7919 if seed is None else seed)
    if n_mc is None:
        if spec.name != "ablation":
            raise ValueError("closed-form ground truth exists only for the ablation model")
        v = ablation_oracle_exact(values)
        return (v, np.zeros_like(v)) if return_se else v
    n_mc = int(n_mc)
    if n_mc < 2:
        raise ValueError("n_mc must be at least 2")
    grid = None if values is None else np.atleast_1d(np.asarray(values, dtype=float))

    if spec.name == "ablation":
        if grid is None:
            raise ValueError("the ablation oracle needs z values")
        s2, _ = ablation_noise()
        eps = rng.standard_normal((n_mc, 5)) * np.sqrt(s2)
        samples = [np.sin(np.sin(ABLATION_ALPHA * z) + eps) @ ABLATION_BETA for z in grid]
    elif spec.name == "synthetic":
        if grid is None:
            raise ValueError("the synthetic oracle needs intervention values")
        b0 = spec.condition
        # E[U2 | B = b0] = b0 / 2 since B = U2 + noise with unit variances
        e = rng.standard_normal((5, n_mc))
        a = e[0] ** 2 + e[1] + e[2]
        if est == "CATE_backdoor":
            c = np.exp(-b0) + e[3]
            sinE = np.sin(np.cos(a) + c / 10 + e[4])
            samples = [np.cos(d) + sinE + b0 / 2 for d in grid]
        else:
            ed = rng.standard_normal(n_mc)
            samples = []
            for b in grid:
                c = np.exp(-b) + e[3]
                dd = np.exp(-c) / 10 + ed
                samples.append(np.cos(dd) + np.sin(np.cos(a) + c / 10 + e[4]) + b0 / 2)
    else:
        ss = np.random.SeedSequence(int(rng.integers(2**63)))
        samples = []
        for s in [None] if grid is None else grid:
            iv = dict(spec.interventions)
            if s is not None:
                iv["statin"] = s
            r = np.random.default_rng(ss)
            psa = _health_d1(r, n_mc, iv, spec.binary)["psa"]
            samples.append(HEALTH_SLOPE * psa)
    samples = np.asarray(samples)
    mean = samples.mean(axis=1)
    if return_se:
        return mean, samples.std(axis=1, ddof=1) / np.sqrt(n_mc)
    return mean
