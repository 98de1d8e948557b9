import json
from dataclasses import replace

import numpy as np
import pytest

from impspec.experiments import (
    BenchmarkConfig,
    BudgetExceeded,
    aggregate,
    config_hash,
    emit_outputs,
    read_trials_csv,
    run_benchmark,
    trial_seed,
)

QUICK = dict(n=30, adam_iters=15, n_boot=2, omegas=[1.0, 4.0], methods=["impspec", "impspec_nocal", "bayesimp"], profile_boot=5)


@pytest.fixture(scope="module")
def ablation_bundle():
    return run_benchmark(BenchmarkConfig("ablation", trials=3, seed=1, **QUICK))


@pytest.fixture(scope="module")
def cbo_bundle():
    return run_benchmark(BenchmarkConfig("synthetic-cbo-backdoor", trials=3, seed=2, methods=["plain"], oracle_mc=5000))


def test_config_validation():
    for bad in ({"experiment": "nope"}, {"experiment": "ablation", "trials": -1}, {"experiment": "ablation", "omegas": [0.0]}, {"experiment": "synthetic", "methods": ["plain"]}):
        with pytest.raises(ValueError):
            BenchmarkConfig(**bad)
    with pytest.raises(ValueError):
        BenchmarkConfig.from_dict({"experiment": "ablation", "colour": 1})


def test_config_json_round_trip(tmp_path):
    cfg = BenchmarkConfig("synthetic", trials=3, omegas=[0.5, 2.0])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert BenchmarkConfig.from_json(p) == cfg


def test_hash_changes_iff_config_changes():
    base = BenchmarkConfig("ablation")
    assert config_hash(base) == config_hash(BenchmarkConfig("ablation"))
    for change in ({"trials": 3}, {"seed": 1}, {"n": 50}, {"n_boot": 5}, {"omegas": [1.0]}, {"adam_iters": 10}, {"methods": ["impspec"]}, {"oracle_mc": 10}, {"profile_boot": 3}, {"sampling_samples": 5}):
        assert config_hash(replace(base, **change)) != config_hash(base)
    assert config_hash(replace(base, jobs=4)) == config_hash(base)


def test_trial_seeds_independent_of_trial_count():
    seeds = [trial_seed(7, t) for t in range(5)]
    assert len(set(seeds)) == 5
    assert trial_seed(7, 3) == seeds[3]
    assert trial_seed(8, 3) != seeds[3]


def test_aggregate_single_trial_has_zero_std():
    agg = aggregate([{"trial": 0, "status": "ok", "rmse": 0.25}])
    assert agg["rmse"] == {"mean": 0.25, "std": 0.0, "n": 1}


def test_aggregate_skips_failures_and_text():
    rows = [{"status": "ok", "a": 1.0, "note": "x"}, {"status": "ok", "a": 3.0}, {"status": "failed", "a": 100.0}]
    agg = aggregate(rows)
    assert agg["a"]["mean"] == 2.0 and agg["a"]["std"] == pytest.approx(np.sqrt(2))
    assert "note" not in agg


def test_single_trial_bundle_matches_row():
    b = run_benchmark(BenchmarkConfig("synthetic-cbo-backdoor", trials=1, methods=["plain"], oracle_mc=5000))
    row = b["rows"][0]
    assert b["aggregates"]["regret_plain"] == {"mean": row["regret_plain"], "std": 0.0, "n": 1}


def test_ablation_bundle_shape(ablation_bundle):
    b = ablation_bundle
    assert b["status"] == "ok" and b["failures"] == 0 and len(b["rows"]) == 3
    for m in ("impspec", "impspec_nocal", "bayesimp"):
        assert f"rmse_{m}" in b["aggregates"]
        assert 0 <= b["profiles"][m].calibration_error <= 1
    assert b["truth"].shape == b["grid"].shape == (100,)


def test_bundle_bit_identical(ablation_bundle):
    again = run_benchmark(BenchmarkConfig("ablation", trials=3, seed=1, **QUICK))
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    assert strip(again["rows"]) == strip(ablation_bundle["rows"])
    assert again["aggregates"] == ablation_bundle["aggregates"]


def test_parallel_equals_serial(cbo_bundle):
    par = run_benchmark(BenchmarkConfig("synthetic-cbo-backdoor", trials=3, seed=2, methods=["plain"], oracle_mc=5000, jobs=2))
    assert par["aggregates"] == cbo_bundle["aggregates"]


def test_emit_outputs_round_trip(tmp_path, ablation_bundle):
    files = {p.name for p in emit_outputs(ablation_bundle, tmp_path)}
    assert {"trials.csv", "aggregates.csv", "profiles.csv", "manifest.json"} <= files
    assert any(f.endswith(".svg") for f in files)
    rows = read_trials_csv(tmp_path / "trials.csv")
    re_agg = aggregate(rows)
    for k, v in ablation_bundle["aggregates"].items():
        assert re_agg[k]["mean"] == pytest.approx(v["mean"], abs=1e-9)
        assert re_agg[k]["std"] == pytest.approx(v["std"], abs=1e-9)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config_hash"] == ablation_bundle["hash"]
    assert man["trial_seeds"] == [trial_seed(1, t) for t in range(3)]
    assert set(man["versions"]) >= {"impspec", "numpy", "scipy"}


def test_cbo_outputs_have_curves(tmp_path, cbo_bundle):
    files = {p.name for p in emit_outputs(cbo_bundle, tmp_path)}
    assert "best_value.svg" in files
    curve = cbo_bundle["curves"][0]["plain"]
    assert curve.size == 10 and np.all(np.diff(curve) <= 0)


def test_empty_bundle_writes_manifest_only(tmp_path):
    b = run_benchmark(BenchmarkConfig("ablation", trials=0))
    assert b["status"] == "empty"
    files = emit_outputs(b, tmp_path)
    assert [p.name for p in files] == ["manifest.json"]


def test_failure_budget(monkeypatch):
    import impspec.experiments as ex

    def boom(cfg, trial, truth):
        raise ValueError("boom")

    monkeypatch.setattr(ex, "_cbo_trial", boom)
    with pytest.raises(BudgetExceeded) as info:
        run_benchmark(BenchmarkConfig("synthetic-cbo-backdoor", trials=2, methods=["plain"], oracle_mc=1000))
    assert info.value.bundle["failures"] == 2
    assert info.value.bundle["rows"][0]["error"].startswith("ValueError")
