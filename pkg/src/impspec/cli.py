"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 failure budget exceeded or nothing to report.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .calibration import DEFAULT_ALPHAS, CalibrationGrid, frozen_builder, optimize_spectral_measure
from .cbo import BoTrace, run_cbo
from .data import read_dataset, write_dataset
from .experiments import BenchmarkConfig, BudgetExceeded, cbo_data, emit_outputs, ground_truth, run_benchmark, task_prior, trial_seed
from .gp import FittedModel, ModelParams, NumericalError, fit_model
from .kernels import SpectralMeasure
from .posterior import CausalQuery, posterior_batch
from .simulators import DgpSpec, simulate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_BUDGET = 0, 2, 3, 4
CBO_METHOD_NAMES = {"impspec": "impspec", "bayesimp": "bayesimp", "cbo": "cbo_plugin", "bo": "plain"}
CBO_EXPERIMENT = {"healthcare": "healthcare-cbo", "synthetic-frontdoor": "synthetic-cbo-frontdoor", "synthetic-backdoor": "synthetic-cbo-backdoor"}


class ConfigError(ValueError):
    pass


def parse_omega(text: str) -> float:
    """``"2^-4"``, ``"0.25"`` or ``"4"`` to a positive float."""
    t = text.strip()
    try:
        if "^" in t:
            b, e = t.split("^")
            v = float(b) ** float(e)
        else:
            v = float(t)
    except ValueError:
        raise ConfigError(f"cannot parse measure scale {text!r}") from None
    if not v > 0:
        raise ConfigError(f"measure scale must be positive, got {text!r}")
    return v


def _jobs(args) -> int:
    if getattr(args, "jobs", None) is not None:
        return args.jobs
    env = os.environ.get("IMPSPEC_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"IMPSPEC_JOBS must be an integer, got {env!r}") from None
    return 1


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _pooled_v(data):
    return data.v1 if data.shared else np.vstack([data.v1, data.v2])


# --- subcommands ----------------------------------------------------------------


def cmd_simulate(args):
    spec = DgpSpec(args.dgp, args.n, args.seed, estimand=args.estimand, condition=args.condition, binary=args.binary)
    ds = simulate(spec)
    paths = write_dataset(ds, Path(args.out) / f"{args.dgp}.csv")
    _print_json(paths)
    return EXIT_OK


def cmd_fit(args):
    ds = read_dataset(args.data, args.roles, args.fusion)
    model = fit_model(ds.to_arrays(), iters=args.iters)
    out = {
        "params": model.params.to_dict(),
        "data": str(Path(args.data).resolve()),
        "roles": ds.roles,
        "fusion": None if args.fusion is None else str(Path(args.fusion).resolve()),
        "roles_file": str(Path(args.roles or Path(args.data).with_suffix(".roles.json")).resolve()),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True))
    _print_json({"model": args.out, "params": out["params"]})
    return EXIT_OK


def load_model(path):
    """``(FittedModel, Dataset)`` from a ``model.json`` written by ``fit``, without refitting."""
    spec = json.loads(Path(path).read_text())
    roles = spec["roles_file"] if spec.get("roles_file") else {"roles": spec["roles"]}
    ds = read_dataset(spec["data"], roles, spec.get("fusion"))
    return FittedModel(ds.to_arrays(), ModelParams.from_dict(spec["params"])), ds


def _read_points(path, ds, query: CausalQuery):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    cols = {h: arr[:, i] for i, h in enumerate(header)}
    roles = query.roles or ds.roles

    def block(r):
        names = roles.get(r, [])
        if not names:
            return None
        missing = [c for c in names if c not in cols]
        if missing:
            raise ConfigError(f"points file lacks columns {missing}")
        return np.column_stack([cols[c] for c in names])

    return header, arr, block("W"), block("Z")


def cmd_effect(args):
    model, ds = load_model(args.model)
    query = CausalQuery.from_dict(json.loads(Path(args.query).read_text())) if args.query else CausalQuery.for_dataset(ds)
    query.check(model)
    header, arr, w, z = _read_points(args.points, ds, query)
    measure = SpectralMeasure.from_data(_pooled_v(model.data), scale=args.measure_omega)
    pm = posterior_batch(model, measure, w, z, query)
    cols = header + ["mean", "variance", "s1", "s2", "s3"]
    print(",".join(cols))
    for i in range(arr.shape[0]):
        vals = list(arr[i]) + [pm.mean[i], pm.variance[i], pm.s1[i], pm.s2[i], pm.s3[i]]
        print(",".join("%.17g" % v for v in vals))
    return EXIT_OK


def cmd_calibrate(args):
    ds = read_dataset(args.data, args.roles, args.fusion)
    data = ds.to_arrays()
    g = json.loads(Path(args.grid).read_text())
    if "z" not in g:
        raise ConfigError("grid JSON needs a 'z' list of evaluation points")
    z = np.asarray(g["z"], dtype=float)
    w = None if g.get("w") is None else np.asarray(g["w"], dtype=float)
    omegas = [parse_omega(t) for t in args.candidates.split(",") if t.strip()]
    grid = CalibrationGrid(alphas=g.get("alphas", DEFAULT_ALPHAS), z=z, w=w, omega_candidates=omegas)
    if args.model:
        params = ModelParams.from_dict(json.loads(Path(args.model).read_text())["params"])
    else:
        params = fit_model(data, iters=args.iters).params
    base = SpectralMeasure.from_data(_pooled_v(data))
    mu, errs = optimize_spectral_measure(frozen_builder(params), data, grid, n_boot=args.boot, seed=args.seed, base=base, return_errors=True)
    _print_json({"omega": mu.scale, "errors": {"%.17g" % k: v for k, v in errs.items()}, "measure": mu.to_dict()})
    return EXIT_OK


def _config(args) -> BenchmarkConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    d["experiment"] = args.experiment if args.experiment else d.get("experiment")
    if d["experiment"] is None:
        raise ConfigError("an experiment name is required")
    for key in ("trials", "seed", "n"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "boot", None) is not None:
        d["n_boot"] = args.boot
    d["jobs"] = _jobs(args)
    return BenchmarkConfig.from_dict(d)


def cmd_benchmark(args):
    cfg = _config(args)
    status = EXIT_OK
    try:
        bundle = run_benchmark(cfg)
    except BudgetExceeded as e:
        bundle, status = e.bundle, EXIT_BUDGET
        print(f"error: {e}", file=sys.stderr)
    run_dir = Path(args.out) / f"{time.strftime('%Y%m%dT%H%M%S')}-{bundle['hash'][:12]}"
    emit_outputs(bundle, run_dir)
    if bundle["status"] == "empty":
        status = EXIT_BUDGET
    _print_json({"run_dir": str(run_dir), "status": bundle["status"], "failures": bundle["failures"], "aggregates": bundle["aggregates"]})
    return status


def cmd_cbo(args):
    method = CBO_METHOD_NAMES[args.method]
    if args.task not in CBO_EXPERIMENT:
        raise ConfigError(f"unknown task {args.task!r}; choose from {sorted(CBO_EXPERIMENT)}")
    if args.resume and args.trials != 1:
        raise ConfigError("--resume continues a single trial; use --trials 1")
    cfg = BenchmarkConfig(CBO_EXPERIMENT[args.task], trials=args.trials, seed=args.seed, n=args.n, methods=[method], cbo_iters=args.iters, refit_every=args.refit_every, jobs=_jobs(args))
    truth = ground_truth(cfg)
    out = Path(args.out) if args.out else None
    regrets = []
    for t in range(args.trials):
        task, data, model = cbo_data(cfg, t)
        seed = trial_seed(cfg.seed, t)
        prior, info = task_prior(cfg, task, data, model, method, seed)
        grid = task.grid()
        resume = None
        if args.resume:
            k = int(np.argmin(truth) if task.direction == "min" else np.argmax(truth))
            resume = BoTrace.from_csv(args.resume, task.direction, float(truth[k]), float(grid[k]), grid)
        tr = run_cbo(prior, truth, grid, args.iters, args.refit_every, seed, task.direction, resume=resume)
        tr.meta.update({"task": task.name, "method": method, "trial": t, "seed": seed, **info})
        regrets.append(tr.cumulative_regret)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            tr.to_csv(out / f"trace_{method}_{t}.csv")
            tr.to_json(out / f"trace_{method}_{t}.json")
    _print_json({"task": args.task, "method": method, "trials": args.trials, "cumulative_regret": regrets, "mean_regret": float(np.mean(regrets)) if regrets else None})
    return EXIT_OK


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="impspec", description="Two-stage GP causal effect posteriors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a benchmark dataset")
    s.add_argument("--dgp", required=True, choices=["ablation", "synthetic", "healthcare"])
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--estimand", default=None)
    s.add_argument("--condition", type=float, default=0.0)
    s.add_argument("--binary", action="store_true", help="healthcare: Bernoulli draws for aspirin/statin/cancer")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit hyperparameters and save a model file")
    s.add_argument("--data", required=True)
    s.add_argument("--roles", default=None)
    s.add_argument("--fusion", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=1000)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("effect", help="posterior moments of the effect at given points")
    s.add_argument("--model", required=True)
    s.add_argument("--query", default=None)
    s.add_argument("--points", required=True)
    s.add_argument("--measure-omega", type=parse_omega, default=1.0)
    s.set_defaults(func=cmd_effect)

    s = sub.add_parser("calibrate", help="choose the integrating measure scale")
    s.add_argument("--data", required=True)
    s.add_argument("--roles", default=None)
    s.add_argument("--fusion", default=None)
    s.add_argument("--grid", required=True)
    s.add_argument("--boot", type=int, default=20)
    s.add_argument("--candidates", default="2^-4,2^-2,1,4,16")
    s.add_argument("--model", default=None, help="reuse hyperparameters from a fitted model file")
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("benchmark", help="run a multi-trial experiment")
    s.add_argument("--experiment", default=None)
    s.add_argument("--config", default=None, help="JSON experiment config")
    s.add_argument("--trials", type=int, default=None)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--boot", type=int, default=None)
    s.add_argument("--jobs", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("cbo", help="causal Bayesian optimization on a benchmark task")
    s.add_argument("--task", required=True)
    s.add_argument("--method", required=True, choices=sorted(CBO_METHOD_NAMES))
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--refit-every", type=int, default=3)
    s.add_argument("--trials", type=int, default=1)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--jobs", type=int, default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--resume", default=None, help="trace CSV to continue from")
    s.set_defaults(func=cmd_cbo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BudgetExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except (ConfigError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
