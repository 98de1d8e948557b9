"""Multi-trial benchmarks: effect recovery, calibration, variance collapse and CBO regret.

Each trial simulates fresh data from a seed derived from ``(master seed,
trial index)``, fits the models, and records scalar metrics plus per-point
posterior moments. Coverage profiles are computed across trials against the
ground truth, with percentile bootstrap bands over trials.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baselines import fit_bayesimp, sampling_gp_effect
from .calibration import (
    DEFAULT_OMEGAS,
    CalibrationGrid,
    coverage_profile,
    frozen_builder,
    optimize_spectral_measure,
)
from .cbo import build_prior, get_task, run_cbo, task_points
from .gp import NumericalError, fit_model
from .kernels import SpectralMeasure
from .posterior import posterior_batch
from .simulators import DgpSpec, oracle_effect, simulate

__all__ = [
    "EXPERIMENTS",
    "BenchmarkConfig",
    "BudgetExceeded",
    "trial_seed",
    "run_benchmark",
    "aggregate",
    "emit_outputs",
    "read_trials_csv",
    "config_hash",
    "ground_truth",
    "eval_grid",
    "task_prior",
    "cbo_data",
]

log = logging.getLogger(__name__)

EXPERIMENTS = ("ablation", "synthetic", "healthcare-cbo", "synthetic-cbo-frontdoor", "synthetic-cbo-backdoor")
ABORT_FRACTION = 0.20
CBO_METHODS = ("impspec", "bayesimp", "cbo_plugin", "plain")


class BudgetExceeded(RuntimeError):
    """More trials failed than the failure budget allows; ``bundle`` holds the partial result."""

    def __init__(self, msg, bundle=None):
        super().__init__(msg)
        self.bundle = bundle


@dataclass
class BenchmarkConfig:
    """Settings for one benchmark run.

    The defaults are the desk-scale settings (20 trials). ``n=None`` takes
    the per-experiment sample size (100, or 500 for the front-door task).
    """

    experiment: str
    trials: int = 20
    seed: int = 0
    n: int | None = None
    n_boot: int = 20
    omegas: list = field(default_factory=lambda: DEFAULT_OMEGAS.tolist())
    adam_iters: int = 1000
    methods: list | None = None
    sampling_samples: int = 200
    oracle_mc: int = 100_000
    cbo_iters: int = 10
    refit_every: int = 3
    profile_boot: int = 100
    jobs: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.trials < 0:
            raise ValueError("trials must be non-negative")
        if self.n is not None and self.n < 4:
            raise ValueError("n must be at least 4")
        if self.n_boot < 1 or self.adam_iters < 1 or self.cbo_iters < 1:
            raise ValueError("n_boot, adam_iters and cbo_iters must be positive")
        if not self.omegas or any(o <= 0 for o in self.omegas):
            raise ValueError("omegas must be positive")
        self.omegas = [float(o) for o in self.omegas]
        if self.methods is None:
            self.methods = list(_DEFAULT_METHODS[self.experiment])
        bad = set(self.methods) - set(_ALL_METHODS[self.experiment])
        if bad:
            raise ValueError(f"methods {sorted(bad)} are not available for {self.experiment}")

    @property
    def is_cbo(self) -> bool:
        return self.experiment.endswith("cbo") or "-cbo-" in self.experiment

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "BenchmarkConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


_ALL_METHODS = {
    "ablation": ("impspec", "impspec_nocal", "bayesimp", "sampling_gp"),
    "synthetic": ("impspec", "impspec_nocal", "bayesimp", "sampling_gp"),
    "healthcare-cbo": CBO_METHODS,
    "synthetic-cbo-frontdoor": CBO_METHODS,
    "synthetic-cbo-backdoor": CBO_METHODS,
}
_DEFAULT_METHODS = {
    "ablation": ("impspec", "impspec_nocal", "bayesimp", "sampling_gp"),
    "synthetic": ("impspec", "impspec_nocal", "bayesimp"),
    "healthcare-cbo": CBO_METHODS,
    "synthetic-cbo-frontdoor": CBO_METHODS,
    "synthetic-cbo-backdoor": CBO_METHODS,
}
_CBO_TASK = {
    "healthcare-cbo": "healthcare",
    "synthetic-cbo-frontdoor": "synthetic-frontdoor",
    "synthetic-cbo-backdoor": "synthetic-backdoor",
}
# scheduling only; results do not depend on it
_NOT_HASHED = ("jobs",)


def config_hash(cfg: BenchmarkConfig) -> str:
    d = {k: v for k, v in cfg.to_dict().items() if k not in _NOT_HASHED}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def trial_seed(master: int, trial: int) -> int:
    """Data seed of one trial; depends only on the master seed and trial index."""
    return int(np.random.SeedSequence([int(master), int(trial)]).generate_state(1)[0])


# --- evaluation grids and oracles ---------------------------------------------


def eval_grid(experiment: str) -> np.ndarray:
    if experiment == "ablation":
        return np.linspace(0.0, 1.0, 100)
    if experiment == "synthetic":
        return np.linspace(-6.0, 6.0, 100)
    return get_task(_CBO_TASK[experiment]).grid()


def _n(cfg: BenchmarkConfig) -> int:
    if cfg.n is not None:
        return cfg.n
    if cfg.is_cbo:
        return get_task(_CBO_TASK[cfg.experiment]).n
    return 100


def ground_truth(cfg: BenchmarkConfig) -> np.ndarray:
    """True effect on the evaluation grid (fixed oracle seed, common random numbers)."""
    grid = eval_grid(cfg.experiment)
    if cfg.experiment == "ablation":
        return oracle_effect(DgpSpec("ablation"), values=grid, n_mc=None)
    if cfg.experiment == "synthetic":
        return oracle_effect(DgpSpec("synthetic", estimand="CATE_backdoor"), values=grid, n_mc=cfg.oracle_mc, seed=cfg.seed)
    task = get_task(_CBO_TASK[cfg.experiment])
    return oracle_effect(task.spec(), values=grid, n_mc=cfg.oracle_mc, seed=cfg.seed)


# --- trials -----------------------------------------------------------------------


def _calibrate(cfg, model, data, w, z, seed):
    base = SpectralMeasure.from_data(data.v1 if data.shared else np.vstack([data.v1, data.v2]))
    grid = CalibrationGrid(z=z, w=w, omega_candidates=cfg.omegas)
    mu, errs = optimize_spectral_measure(frozen_builder(model.params), data, grid, n_boot=cfg.n_boot, seed=seed, base=base, return_errors=True)
    return base, mu, errs


def _effect_trial(cfg: BenchmarkConfig, trial: int, truth: np.ndarray) -> dict:
    seed = trial_seed(cfg.seed, trial)
    grid = eval_grid(cfg.experiment)
    if cfg.experiment == "ablation":
        spec = DgpSpec("ablation", _n(cfg), seed)
        w, z = None, grid
    else:
        spec = DgpSpec("synthetic", _n(cfg), seed, estimand="CATE_backdoor")
        w, z = np.column_stack([grid, np.zeros_like(grid)]), np.zeros((grid.size, 1))
    data = simulate(spec).to_arrays()
    model = fit_model(data, iters=cfg.adam_iters)
    base, mu, errs = _calibrate(cfg, model, data, w, z, seed)
    row = {"omega": mu.scale, "self_cal_error": errs.get(mu.scale, float("nan"))}
    moments = {}
    bimp = None
    for m in cfg.methods:
        if m == "impspec":
            pm = posterior_batch(model, mu, w, z)
            moments[m] = (pm.mean, pm.variance)
        elif m == "impspec_nocal":
            pm = posterior_batch(model, base, w, z)
            moments[m] = (pm.mean, pm.variance)
        elif m == "bayesimp":
            bimp = fit_bayesimp(data, model.params, iters=cfg.adam_iters)
            pm = bimp.moments(w, z)
            moments[m] = (pm.mean, pm.variance)
        elif m == "sampling_gp":
            mean, var, _ = sampling_gp_effect(data, model.params, None, w, z, cfg.sampling_samples, seed)
            moments[m] = (mean, var)
    for m, (mean, _) in moments.items():
        row[f"rmse_{m}"] = float(np.sqrt(np.mean((mean - truth) ** 2)))
    if cfg.experiment == "synthetic":
        ood = np.abs(grid) >= 4
        ind = np.abs(grid) <= 2
        for m, (mean, _) in moments.items():
            row[f"rmse_id_{m}"] = float(np.sqrt(np.mean((mean - truth)[ind] ** 2)))
            row[f"rmse_ood_{m}"] = float(np.sqrt(np.mean((mean - truth)[ood] ** 2)))
        row.update(_collapse(model, mu, bimp, data))
    return {"row": row, "moments": {k: (np.asarray(a), np.asarray(b)) for k, (a, b) in moments.items()}}


def _collapse(model, measure, bimp, data) -> dict:
    """Variance far outside the training range relative to in-sample variance."""
    out = {}
    if bimp is None:
        return out
    ls_d = float(bimp.params.kw.lengthscales[0])
    d_far = float(data.w1[:, 0].max() + 10 * ls_d)
    w_far, z_far = np.array([[d_far, 0.0]]), np.zeros((1, 1))
    in_var = bimp.moments(data.w1, data.z2).variance
    far = bimp.moments(w_far, z_far).variance[0]
    out["d_far"] = d_far
    out["bayesimp_far_var"] = float(far)
    out["bayesimp_insample_median_var"] = float(np.median(in_var))
    out["bayesimp_collapse_ratio"] = float(far / max(np.median(in_var), 1e-300))
    pm = posterior_batch(model, measure, w_far, z_far)
    out["impspec_far_var"] = float(pm.variance[0])
    out["impspec_far_s3"] = float(pm.s3[0])
    out["impspec_far_var_over_s3"] = float(pm.variance[0] / pm.s3[0]) if pm.s3[0] > 0 else float("inf")
    return out


def task_prior(cfg: BenchmarkConfig, task, data, model, method: str, seed):
    """Surrogate prior of one CBO method fitted to one observational dataset.

    The integrating measure of the ``impspec`` prior is calibrated by
    bootstrap on the task's own query (observed covariate rows for the
    averaged healthcare effect, 20 grid points otherwise).
    """
    info = {}
    if method == "impspec":
        if task.dgp == "healthcare":
            w, z = None, data.z2[: min(30, data.n2)]
        else:
            w, z = task_points(task, np.linspace(*task.domain, 20))
        _, mu, _ = _calibrate(cfg, model, data, w, z, seed)
        info["omega"] = mu.scale
        return build_prior("impspec", model, task, mu), info
    if method == "bayesimp":
        return build_prior("bayesimp", fit_bayesimp(data, model.params, iters=cfg.adam_iters), task), info
    if method == "cbo_plugin":
        return build_prior("cbo_plugin", model, task), info
    return build_prior("plain", task=task), info


def cbo_data(cfg: BenchmarkConfig, trial: int):
    """Task, simulated observational data and fitted model of one CBO trial."""
    seed = trial_seed(cfg.seed, trial)
    task = get_task(_CBO_TASK[cfg.experiment])
    data = simulate(task.spec(_n(cfg), seed)).to_arrays()
    model = fit_model(data, iters=cfg.adam_iters) if any(m != "plain" for m in cfg.methods) else None
    return task, data, model


def _cbo_trial(cfg: BenchmarkConfig, trial: int, truth: np.ndarray) -> dict:
    seed = trial_seed(cfg.seed, trial)
    task, data, model = cbo_data(cfg, trial)
    row, curves = {}, {}
    for m in cfg.methods:
        prior, info = task_prior(cfg, task, data, model, m, seed)
        row.update(info)
        tr = run_cbo(prior, truth, task.grid(), cfg.cbo_iters, cfg.refit_every, seed, task.direction)
        row[f"regret_{m}"] = tr.cumulative_regret
        row[f"final_best_{m}"] = tr.best[-1]
        if m == "cbo_plugin":
            row["plugin_clamp_events"] = int(sum(prior.clamp_events))
        curves[m] = np.asarray(tr.best)
    return {"row": row, "curves": curves}


def _run_trial(args):
    cfg, trial, truth = args
    t0 = time.perf_counter()
    try:
        out = (_cbo_trial if cfg.is_cbo else _effect_trial)(cfg, trial, truth)
        out["row"] = {"trial": trial, "seed": trial_seed(cfg.seed, trial), "status": "ok", "error": "", **out["row"]}
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError, ValueError) as e:
        log.warning("trial %d failed: %s", trial, e)
        log.debug("%s", traceback.format_exc())
        out = {"row": {"trial": trial, "seed": trial_seed(cfg.seed, trial), "status": "failed", "error": f"{type(e).__name__}: {e}"}}
    out["row"]["seconds"] = time.perf_counter() - t0
    return out


# --- aggregation ---------------------------------------------------------------


def aggregate(rows) -> dict:
    """Mean, standard deviation and count of every numeric column over successful trials.

    The standard deviation uses ``ddof=1`` and is reported as 0 for a single trial.
    """
    ok = [r for r in rows if r.get("status", "ok") == "ok"]
    keys = []
    for r in ok:
        for k, v in r.items():
            if k not in ("trial", "seed", "status", "error", "seconds") and k not in keys and _numeric(v):
                keys.append(k)
    out = {}
    for k in keys:
        vals = np.array([float(r[k]) for r in ok if k in r and _numeric(r[k])])
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            continue
        sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        out[k] = {"mean": float(np.mean(vals)), "std": sd, "n": int(vals.size)}
    return out


def _numeric(v) -> bool:
    if isinstance(v, (bool, np.bool_)):
        return False
    try:
        float(v)
        return True
    except (TypeError, ValueError):
        return False


def _profiles(cfg, results, truth):
    """Cross-trial coverage profiles per method; for the synthetic run also per region."""
    ok = [r for r in results if "moments" in r]
    if len(ok) < 2:
        return {}
    grid = eval_grid(cfg.experiment)
    regions = {"all": np.ones(grid.size, bool)}
    if cfg.experiment == "synthetic":
        regions = {"all": regions["all"], "id": np.abs(grid) <= 2, "ood": np.abs(grid) >= 4}
    out = {}
    for m in cfg.methods:
        for reg, mask in regions.items():
            trials = [(r["moments"][m][0][mask], r["moments"][m][1][mask]) for r in ok]
            key = m if reg == "all" else f"{m}@{reg}"
            out[key] = coverage_profile(trials, truth[mask], n_outer_boot=cfg.profile_boot, seed=cfg.seed)
    return out


def run_benchmark(config) -> dict:
    """Run every trial of an experiment and aggregate.

    Parameters
    ----------
    config : BenchmarkConfig or dict

    Returns
    -------
    dict
        ``config``, ``hash``, ``status`` (``"ok"`` or ``"empty"``), ``grid``,
        ``truth``, ``rows`` (one dict per trial, failures included),
        ``aggregates``, ``profiles`` (method -> CoverageProfile),
        ``moments`` / ``curves`` per trial, and ``failures``.

    Raises
    ------
    BudgetExceeded
        When more than 20% of trials fail; the partial bundle is attached.
    """
    cfg = config if isinstance(config, BenchmarkConfig) else BenchmarkConfig.from_dict(config)
    bundle = {
        "config": cfg.to_dict(),
        "hash": config_hash(cfg),
        "status": "empty",
        "grid": eval_grid(cfg.experiment),
        "rows": [],
        "aggregates": {},
        "profiles": {},
        "moments": [],
        "curves": [],
        "failures": 0,
    }
    if cfg.trials == 0:
        bundle["truth"] = None
        return bundle
    truth = ground_truth(cfg)
    bundle["truth"] = truth
    jobs = max(1, int(cfg.jobs))
    tasks = [(cfg, t, truth) for t in range(cfg.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_trial, tasks))
    else:
        results = [_run_trial(t) for t in tasks]
    results.sort(key=lambda r: r["row"]["trial"])
    bundle["rows"] = [r["row"] for r in results]
    bundle["moments"] = [r.get("moments") for r in results]
    bundle["curves"] = [r.get("curves") for r in results]
    bundle["failures"] = sum(r["row"]["status"] != "ok" for r in results)
    bundle["status"] = "ok"
    if bundle["failures"] > ABORT_FRACTION * cfg.trials:
        bundle["status"] = "aborted"
        raise BudgetExceeded(f"{bundle['failures']} of {cfg.trials} trials failed", bundle)
    bundle["aggregates"] = aggregate(bundle["rows"])
    if not cfg.is_cbo:
        bundle["profiles"] = _profiles(cfg, results, truth)
    return bundle


# --- outputs -------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return v


def _write_rows(path, rows, columns=None):
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def read_trials_csv(path) -> list:
    """Per-trial rows back from ``trials.csv`` (numbers as floats, blanks dropped)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                if v == "":
                    continue
                if k in ("status", "error"):
                    row[k] = v
                else:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            rows.append(row)
    return rows


def _versions() -> dict:
    return {"impspec": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def emit_outputs(bundle: dict, out_dir, formats=("csv", "json", "svg")) -> list:
    """Write tables, a manifest and plots for a result bundle.

    An empty bundle (no trials) gets a manifest only. Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    cfg = bundle["config"]
    written = []
    manifest = {
        "experiment": cfg["experiment"],
        "config": cfg,
        "config_hash": bundle["hash"],
        "status": bundle["status"],
        "master_seed": cfg["seed"],
        "trial_seeds": [trial_seed(cfg["seed"], t) for t in range(cfg["trials"])],
        "failures": bundle["failures"],
        "versions": _versions(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if bundle["status"] != "empty" and "csv" in formats:
        p = out / "trials.csv"
        _write_rows(p, bundle["rows"])
        written.append(p)
        agg = [{"metric": k, **v} for k, v in bundle["aggregates"].items()]
        p = out / "aggregates.csv"
        _write_rows(p, agg, ["metric", "mean", "std", "n"])
        written.append(p)
        if bundle["profiles"]:
            prow = []
            for m, pr in bundle["profiles"].items():
                for i, a in enumerate(pr.alphas):
                    prow.append({"method": m, "alpha": a, "coverage": pr.coverage[i], "abs_error": pr.abs_error[i], "band_lo": pr.band_lo[i], "band_hi": pr.band_hi[i]})
            p = out / "profiles.csv"
            _write_rows(p, prow)
            written.append(p)
        manifest["calibration_error"] = {m: pr.calibration_error for m, pr in bundle["profiles"].items()}
    if bundle["status"] != "empty" and "svg" in formats:
        written += _plots(bundle, out)
    p = out / "manifest.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    written.append(p)
    return written


def _plots(bundle, out: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    grid, truth = bundle["grid"], bundle["truth"]
    first = next((m for m in bundle["moments"] if m), None)
    if first:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(grid, truth, "k--", label="truth")
        for m, (mean, var) in first.items():
            sd = np.sqrt(np.maximum(var, 0))
            ax.plot(grid, mean, label=m)
            ax.fill_between(grid, mean - 1.96 * sd, mean + 1.96 * sd, alpha=0.15)
        ax.set_xlabel("intervention")
        ax.set_ylabel("effect")
        ax.legend(fontsize=7)
        paths.append(_save(fig, out / "posterior_bands.svg"))
    if bundle["profiles"]:
        fig, ax = plt.subplots(figsize=(6, 4))
        for m, pr in bundle["profiles"].items():
            ax.plot(pr.alphas, pr.abs_error, label=f"{m} ({pr.calibration_error:.3f})")
            ax.fill_between(pr.alphas, pr.band_lo, pr.band_hi, alpha=0.15)
        ax.set_xlabel("nominal level")
        ax.set_ylabel("|coverage - level|")
        ax.legend(fontsize=7)
        paths.append(_save(fig, out / "calibration_profile.svg"))
    curves = [c for c in bundle["curves"] if c]
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for m in curves[0]:
            arr = np.array([c[m] for c in curves])
            it = np.arange(1, arr.shape[1] + 1)
            ax.plot(it, arr.mean(0), marker="o", label=m)
        ax.axhline(float(np.min(truth) if get_task(_CBO_TASK[bundle["config"]["experiment"]]).direction == "min" else np.max(truth)), color="k", ls="--")
        ax.set_xlabel("iteration")
        ax.set_ylabel("best value found")
        ax.legend(fontsize=7)
        paths.append(_save(fig, out / "best_value.svg"))
    return paths


def _save(fig, path):
    import matplotlib.pyplot as plt

    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
