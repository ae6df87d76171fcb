import csv
import json

import numpy as np
import pytest
from test_datatools import make_table

from nsdpo.cli import main
from nsdpo.core import read_dataset_jsonl, sample_dataset, default_schedule, write_dataset_jsonl, write_test_set_jsonl, sample_test_set
from nsdpo.datatools import min_divergence_filter, read_rows_jsonl, write_table_csv

FAST = ["--steps", "20", "--eval-every", "5"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_gen_defaults(tmp_path):
    assert main(["gen", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "train.jsonl").read_text().splitlines()) == 2001
    assert len((tmp_path / "test.jsonl").read_text().splitlines()) == 101
    m = manifest(tmp_path)
    assert m["command"] == "gen" and m["config"]["seed"] == 0 and m["config"]["points_per_step"] == 20
    assert len(read_dataset_jsonl(tmp_path / "train.jsonl")) == 2000


def test_gen_seed_changes_output(tmp_path):
    main(["gen", "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["gen", "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "train.jsonl").read_bytes() != (tmp_path / "b" / "train.jsonl").read_bytes()


def test_gen_reproducible_from_manifest(tmp_path):
    main(["gen", "--out", str(tmp_path / "a"), "--seed", "7", "--T", "21", "--points-per-step", "3"])
    main(["gen", "--out", str(tmp_path / "b"), "--config", str(tmp_path / "a" / "manifest.json")])
    for name in ("train.jsonl", "test.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 8, "gamma": 0.5, "T": 21, "points_per_step": 2}))
    main(["train", "--out", str(tmp_path / "r"), "--config", str(cfg), "--steps", "4", "--no-plot"])
    c = manifest(tmp_path / "r")["config"]
    assert (c["steps"], c["gamma"], c["T"], c["learning_rate"]) == (4, 0.5, 21, 0.01)


def test_train_outputs(tmp_path):
    assert main(["train", "--out", str(tmp_path), *FAST]) == 0
    rows = read_csv(tmp_path / "trace.csv")
    assert [int(r["step"]) for r in rows] == [0, 5, 10, 15, 20]
    params = json.loads((tmp_path / "params.json").read_text())
    assert len(params["theta"]) == 8 and params["objective"] == "nsdpo"
    assert (tmp_path / "trace.png").stat().st_size > 0


def test_no_plot_skips_png(tmp_path):
    main(["train", "--out", str(tmp_path), *FAST, "--no-plot"])
    assert not (tmp_path / "trace.png").exists()


def test_gamma_one_trace_equals_dpo(tmp_path):
    main(["train", "--out", str(tmp_path / "ns"), "--objective", "nsdpo", "--gamma", "1", *FAST, "--no-plot"])
    main(["train", "--out", str(tmp_path / "dpo"), "--objective", "dpo", *FAST, "--no-plot"])
    assert (tmp_path / "ns" / "trace.csv").read_bytes() == (tmp_path / "dpo" / "trace.csv").read_bytes()


def test_train_from_generated_files_matches_inline(tmp_path):
    main(["gen", "--out", str(tmp_path / "data"), "--seed", "3"])
    main(["train", "--out", str(tmp_path / "a"), "--data", str(tmp_path / "data"), "--seed", "3", *FAST, "--no-plot"])
    main(["train", "--out", str(tmp_path / "b"), "--seed", "3", *FAST, "--no-plot"])
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_train_empty_window_reports_error(tmp_path, capsys):
    s = default_schedule()
    ds = sample_dataset(s, 2, seed=0)
    ds = ds.subset(ds.t < 40)
    data = tmp_path / "data"
    data.mkdir()
    write_dataset_jsonl(ds, data / "train.jsonl")
    write_test_set_jsonl(sample_test_set(s, 10), data / "test.jsonl")
    code = main(["train", "--out", str(tmp_path / "r"), "--data", str(data), "--objective", "swdpo", "--window", "10", *FAST])
    assert code == 1
    assert "no datapoint" in capsys.readouterr().err


def test_invalid_flags_exit_with_usage(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--objective", "ppo"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_sweep_single_cell_equals_train(tmp_path):
    main(["sweep", "--out", str(tmp_path / "s"), "--gammas", "0.7", "--windows", "", "--no-dpo", "--seeds", "4", *FAST, "--no-plot"])
    main(["train", "--out", str(tmp_path / "t"), "--gamma", "0.7", "--seed", "4", *FAST, "--no-plot"])
    cell = tmp_path / "s" / "cells" / "nsdpo_gamma=0.7_seed=4" / "trace.csv"
    assert cell.read_bytes() == (tmp_path / "t" / "trace.csv").read_bytes()


def test_sweep_aggregate_deterministic_and_parallel(tmp_path):
    args = ["--gammas", "0.5,0.9", "--windows", "33", "--seeds", "0-2", *FAST]
    assert main(["sweep", "--out", str(tmp_path / "a"), "--jobs", "1", *args]) == 0
    assert main(["sweep", "--out", str(tmp_path / "b"), "--jobs", "3", *args, "--no-plot"]) == 0
    assert (tmp_path / "a" / "aggregate.csv").read_bytes() == (tmp_path / "b" / "aggregate.csv").read_bytes()
    rows = read_csv(tmp_path / "a" / "aggregate.csv")
    assert {r["method"] for r in rows} == {"dpo", "nsdpo_gamma=0.5", "nsdpo_gamma=0.9", "swdpo_w=33"}
    assert all(r["n_seeds"] == "3" for r in rows)
    assert (tmp_path / "a" / "sweep.png").exists()
    assert json.loads((tmp_path / "a" / "failures.json").read_text()) == {"failed": []}


def test_sweep_partial_failure(tmp_path, capsys):
    code = main(["sweep", "--out", str(tmp_path), "--gammas", "0.9,1.5", "--windows", "", "--no-dpo", "--seeds", "0", *FAST, "--no-plot"])
    assert code == 1
    failed = json.loads((tmp_path / "failures.json").read_text())["failed"]
    assert [f["cell"] for f in failed] == ["nsdpo_gamma=1.5_seed=0"]
    assert json.loads(capsys.readouterr().err) == {"failed": ["nsdpo_gamma=1.5_seed=0"]}
    assert (tmp_path / "cells" / "nsdpo_gamma=0.9_seed=0" / "trace.csv").exists()


def test_bound_study_stationary(tmp_path):
    assert main(["bound-study", "--out", str(tmp_path), "--seeds", "0-1", "--points-grid", "2,4", "--steps", "30"]) == 0
    rows = read_csv(tmp_path / "bound_study.csv")
    assert len(rows) == 4
    assert list(rows[0])[:8] == ["n", "T", "gamma", "B_T", "xi_learn", "xi_track", "bound_rhs", "empirical_error"]
    assert all(float(r["xi_track"]) == 0.0 and float(r["B_T"]) == 0.0 for r in rows)
    assert all(float(r["error_to_bound_ratio"]) > 0 for r in rows)
    assert (tmp_path / "bound_study.png").exists()


def test_bound_study_drifting_has_tracking(tmp_path):
    main(["bound-study", "--out", str(tmp_path), "--schedule", "rotation", "--seeds", "0", "--points-grid", "2", "--steps", "10", "--no-plot"])
    (row,) = read_csv(tmp_path / "bound_study.csv")
    assert float(row["xi_track"]) > 0 and 3.1 < float(row["B_T"]) < 3.15
    assert 0 < float(row["gamma"]) < 1


def test_build_dataset_changepoint_manifest(tmp_path):
    table = tmp_path / "table.csv"
    write_table_csv(make_table(2000), table)
    out = tmp_path / "ufb"
    assert main(["build-dataset", "--out", str(out), "--preset", "ufb-changepoint", "--table", str(table), "--tcp", "66", "--rho", "0.9"]) == 0
    c = manifest(out)["config"]
    assert (c["tcp"], c["rho"]) == (66, 0.9)
    again = tmp_path / "again"
    main(["build-dataset", "--out", str(again), "--config", str(out / "manifest.json")])
    assert (out / "rows.jsonl").read_bytes() == (again / "rows.jsonl").read_bytes()


def test_build_dataset_nsgo_filters(tmp_path):
    table_rows = make_table(1000)
    table = tmp_path / "table.csv"
    write_table_csv(table_rows, table)
    main(["build-dataset", "--out", str(tmp_path / "o"), "--preset", "nsgo-gradual", "--table", str(table), "--threshold", "0.2"])
    kept = {r.item_id for r in min_divergence_filter(table_rows, 0.2)}
    rows = read_rows_jsonl(tmp_path / "o" / "rows.jsonl")
    assert {r.item_id for r in rows} == kept


def test_build_dataset_requires_inputs(tmp_path, capsys):
    assert main(["build-dataset", "--out", str(tmp_path), "--preset", "tvhh-gradual"]) == 1
    assert "needs" in capsys.readouterr().err


def test_eval_records(tmp_path):
    main(["gen", "--out", str(tmp_path / "d")])
    main(["train", "--out", str(tmp_path / "r"), "--data", str(tmp_path / "d"), *FAST, "--no-plot"])
    assert main(["eval", "--out", str(tmp_path / "e"), "--params", str(tmp_path / "r" / "params.json"), "--data", str(tmp_path / "d")]) == 0
    records = [json.loads(line) for line in (tmp_path / "e" / "metrics.jsonl").read_text().splitlines()]
    assert [r["metric"] for r in records] == ["reward_accuracy", "expected_regret"]
    run_id = manifest(tmp_path / "r")["run_id"]
    for r in records:
        assert set(r) == {"run_id", "metric", "value", "std_error"} and r["run_id"] == run_id
        assert np.isfinite(r["value"]) and r["std_error"] >= 0
