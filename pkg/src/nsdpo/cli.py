"""Command-line front end.

Every command resolves its configuration as flags over an optional JSON config
file over built-in defaults, and writes ``manifest.json`` with the resolved
config into ``--out``.  Passing that manifest back through ``--config``
reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from nsdpo import __version__
from nsdpo import datatools
from nsdpo.core import DriftSchedule, Environment, read_dataset_jsonl, read_test_set_jsonl, write_dataset_jsonl, write_test_set_jsonl
from nsdpo.experiments import SCHEDULES, Cell, ExperimentConfig, aggregate, bound_study, make_data, run_cells, summarize
from nsdpo.metrics import expected_regret, reward_accuracy
from nsdpo.objectives import OBJECTIVES, ObjectiveConfig
from nsdpo.optimizer import TrainConfig, train

log = logging.getLogger("nsdpo")

PRESETS = ("nsgo-gradual", "ufb-changepoint", "tvhh-gradual", "tvhh-changepoint")

_DATA = {
    "d_x": 4,
    "n_actions": 16,
    "T": 101,
    "points_per_step": 20,
    "n_test": 100,
    "tau": 1.0,
    "schedule": "rotation",
    "seed": 0,
}
_TRAIN = {
    "lam": 0.0,
    "learning_rate": 0.01,
    "steps": 1000,
    "eval_every": 10,
    "normalize_gradient": True,
    "plot": True,
}
DEFAULTS = {
    "gen": dict(_DATA),
    "train": {**_DATA, **_TRAIN, "objective": "nsdpo", "gamma": 0.9, "window": None, "data": None},
    "sweep": {**_DATA, **_TRAIN, "gammas": [0.3, 0.5, 0.7, 0.9], "windows": [33], "dpo": True, "seeds": list(range(10)), "jobs": 1},
    "bound-study": {
        **_DATA,
        **_TRAIN,
        "schedule": "stationary",
        "points_grid": [5, 20, 80],
        "seeds": list(range(20)),
        "gamma": None,
        "lam": None,
        "delta": 0.1,
        "C1": 1.0,
        "C2": 0.5,
        "regret_contexts": 2000,
    },
    "build-dataset": {
        "preset": None,
        "table": None,
        "T": 101,
        "tcp": 66,
        "rho": 1.0,
        "threshold": 0.2,
        "t_start": 33,
        "t_end": 66,
        "n_rows": None,
        "test_fraction": 0.0,
        "seed": 0,
    },
    "eval": {"params": None, "data": None, "run_id": None, "regret_contexts": 2000, "seed": 0},
}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    """``"0-9"``, ``"1,3,5"`` or a mix of both."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _optional(kind):
    def parse(text):
        return None if text.lower() == "none" else kind(text)

    return parse


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--out", type=Path, help="output directory (default: current directory)")
    common.add_argument("--config", type=Path, help="JSON config or a manifest from a previous run")
    common.add_argument("--jobs", type=int, help="worker processes for sweeps")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False, argument_default=S)
    data.add_argument("--d-x", dest="d_x", type=int)
    data.add_argument("--n-actions", dest="n_actions", type=int)
    data.add_argument("--T", dest="T", type=int)
    data.add_argument("--points-per-step", dest="points_per_step", type=int)
    data.add_argument("--n-test", dest="n_test", type=int)
    data.add_argument("--tau", type=float)
    data.add_argument("--schedule", choices=SCHEDULES)

    opt = argparse.ArgumentParser(add_help=False, argument_default=S)
    opt.add_argument("--lam", type=_optional(float), help="L2 regularisation strength")
    opt.add_argument("--lr", dest="learning_rate", type=float)
    opt.add_argument("--steps", type=int)
    opt.add_argument("--eval-every", dest="eval_every", type=int)
    opt.add_argument("--plain-gradient", dest="normalize_gradient", action="store_false", help="unnormalised gradient steps")
    opt.add_argument("--no-plot", dest="plot", action="store_false", help="skip PNG figures")

    parser = argparse.ArgumentParser(prog="nsdpo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common, data], argument_default=S, help="sample a synthetic train/test dataset")

    p = sub.add_parser("train", parents=[common, data, opt], argument_default=S, help="train one objective")
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--gamma", type=float)
    p.add_argument("--window", type=_optional(int))
    p.add_argument("--data", type=str, help="directory with train.jsonl and test.jsonl from `gen`")

    p = sub.add_parser("sweep", parents=[common, data, opt], argument_default=S, help="grid over gamma, window and seed")
    p.add_argument("--gammas", type=_float_list)
    p.add_argument("--windows", type=_int_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--no-dpo", dest="dpo", action="store_false")

    p = sub.add_parser("bound-study", parents=[common, data, opt], argument_default=S, help="empirical error against the bound over n")
    p.add_argument("--points-grid", dest="points_grid", type=_int_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--gamma", type=_optional(float))
    p.add_argument("--delta", type=float)
    p.add_argument("--C1", type=float)
    p.add_argument("--C2", type=float)
    p.add_argument("--regret-contexts", dest="regret_contexts", type=int)

    p = sub.add_parser("build-dataset", parents=[common], argument_default=S, help="time-stamp a two-source preference table")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--table", type=str, help="CSV with columns " + ",".join(datatools.TABLE_COLUMNS))
    p.add_argument("--T", dest="T", type=int)
    p.add_argument("--tcp", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--t-start", dest="t_start", type=int)
    p.add_argument("--t-end", dest="t_end", type=int)
    p.add_argument("--n-rows", dest="n_rows", type=_optional(int))
    p.add_argument("--test-fraction", dest="test_fraction", type=float)

    p = sub.add_parser("eval", parents=[common], argument_default=S, help="score trained parameters on a test set")
    p.add_argument("--params", type=str, help="params.json written by `train`")
    p.add_argument("--data", type=str, help="directory with test.jsonl from `gen`")
    p.add_argument("--run-id", dest="run_id", type=str)
    p.add_argument("--regret-contexts", dest="regret_contexts", type=int)
    return parser


def _load_config(path: Path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg.get("config", cfg)


def resolve_config(command: str, flags: dict) -> dict:
    """Flags over config file over defaults, restricted to the command's keys."""
    defaults = DEFAULTS[command]
    file_cfg = _load_config(flags["config"]) if "config" in flags else {}
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        log.warning("ignoring unknown config keys for %s: %s", command, sorted(unknown))
    cfg = dict(defaults)
    cfg.update({k: v for k, v in file_cfg.items() if k in defaults})
    cfg.update({k: v for k, v in flags.items() if k in defaults})
    return cfg


def _run_id(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, **cfg}, sort_keys=True, default=str)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, rows, columns=None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _write_manifest(out: Path, command: str, cfg: dict, **extra) -> dict:
    manifest = {"command": command, "run_id": _run_id(command, cfg), "version": __version__, "config": cfg, **extra}
    _write_json(out / "manifest.json", manifest)
    return manifest


def _experiment(cfg: dict) -> ExperimentConfig:
    fields = ExperimentConfig.__dataclass_fields__
    return ExperimentConfig(**{k: v for k, v in cfg.items() if k in fields and v is not None})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: dict, out: Path) -> int:
    _, dataset, test = make_data(_experiment(cfg), cfg["seed"])
    write_dataset_jsonl(dataset, out / "train.jsonl")
    write_test_set_jsonl(test, out / "test.jsonl")
    _write_manifest(out, "gen", cfg, rows={"train": len(dataset), "test": len(test)})
    print(f"wrote {len(dataset)} train and {len(test)} test rows to {out}")
    return 0


def _params_record(theta, objective, obj_cfg, env: Environment, schedule: DriftSchedule | None, run_id: str) -> dict:
    return {
        "run_id": run_id,
        "objective": objective,
        "theta": [float(v) for v in theta],
        "objective_config": obj_cfg.to_dict(),
        "env": {"d_x": env.d_x, "n_actions": env.n_actions, "tau": env.tau},
        "schedule": None if schedule is None else schedule.to_dict(),
    }


def cmd_train(cfg: dict, out: Path) -> int:
    exp = _experiment(cfg)
    if cfg["data"]:
        data_dir = Path(cfg["data"])
        dataset = read_dataset_jsonl(data_dir / "train.jsonl")
        test = read_test_set_jsonl(data_dir / "test.jsonl")
        sched = dataset.meta.get("schedule")
        schedule = DriftSchedule.from_dict(sched) if sched else None
    else:
        schedule, dataset, test = make_data(exp, cfg["seed"])
    obj_cfg = ObjectiveConfig(tau=dataset.env.tau, gamma=cfg["gamma"], lam=cfg["lam"] or 0.0, window_w=cfg["window"])
    train_cfg = TrainConfig(cfg["learning_rate"], cfg["steps"], cfg["normalize_gradient"], "zeros", cfg["eval_every"], cfg["seed"])
    theta, trace = train(cfg["objective"], dataset, obj_cfg, train_cfg, dataset.T, test)
    manifest = _write_manifest(out, "train", cfg)
    trace.to_csv(out / "trace.csv")
    _write_json(out / "params.json", _params_record(theta, cfg["objective"], obj_cfg, dataset.env, schedule, manifest["run_id"]))
    if cfg["plot"]:
        from nsdpo.plotting import plot_trace

        plot_trace(trace, out / "trace.png", title=cfg["objective"])
    print(f"final reward accuracy {trace.reward_accuracy[-1]:.4f}, loss {trace.loss[-1]:.6f}")
    return 0


def sweep_cells(cfg: dict) -> list[Cell]:
    cells = []
    for seed in cfg["seeds"]:
        if cfg["dpo"]:
            cells.append(Cell("dpo", seed))
        cells += [Cell("nsdpo", seed, gamma=float(g)) for g in cfg["gammas"]]
        cells += [Cell("swdpo", seed, window=int(w)) for w in cfg["windows"]]
    return cells


def cmd_sweep(cfg: dict, out: Path) -> int:
    exp = _experiment(cfg)
    results, failures = run_cells(exp, sweep_cells(cfg), jobs=cfg["jobs"])
    manifest = _write_manifest(out, "sweep", cfg)
    env = exp.env
    for r in results:
        cell_dir = out / "cells" / r.cell.cell_id
        cell_dir.mkdir(parents=True, exist_ok=True)
        r.trace.to_csv(cell_dir / "trace.csv")
        obj_cfg = ObjectiveConfig(tau=exp.tau, gamma=r.cell.gamma, lam=exp.lam, window_w=r.cell.window)
        record = _params_record(r.theta, r.cell.objective, obj_cfg, env, None, manifest["run_id"])
        _write_json(cell_dir / "params.json", {**record, "seed": r.cell.seed})
    rows = aggregate(results)
    _write_csv(out / "aggregate.csv", rows)
    _write_csv(out / "summary.csv", summarize(results))
    _write_json(out / "failures.json", {"failed": [{"cell": k, "error": v} for k, v in sorted(failures.items())]})
    if cfg["plot"] and rows:
        from nsdpo.plotting import plot_sweep

        plot_sweep(rows, out / "sweep.png")
    for s in summarize(results):
        print(f"{s['method']:<22} final {s['final_mean_accuracy']:.4f} +- {s['final_std_accuracy']:.4f}")
    if failures:
        json.dump({"failed": sorted(failures)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


BOUND_COLUMNS = ("n", "T", "gamma", "B_T", "xi_learn", "xi_track", "bound_rhs", "empirical_error")


def cmd_bound_study(cfg: dict, out: Path) -> int:
    exp = _experiment(cfg)
    rows = bound_study(exp, cfg["points_grid"], cfg["seeds"], cfg["gamma"], cfg["lam"], cfg["delta"], cfg["C1"], cfg["C2"], cfg["regret_contexts"])
    _write_manifest(out, "bound-study", cfg)
    columns = list(BOUND_COLUMNS) + [k for k in rows[0] if k not in BOUND_COLUMNS]
    _write_csv(out / "bound_study.csv", rows, columns)
    if cfg["plot"]:
        from nsdpo.plotting import plot_bound_study

        plot_bound_study(rows, out / "bound_study.png")
    ns = np.array([r["n"] for r in rows], dtype=float)
    xi = np.array([r["xi_learn"] for r in rows])
    if len(set(ns)) > 1 and np.all(xi > 0):
        slope = np.polyfit(np.log(ns), np.log(xi), 1)[0]
        print(f"log xi_learn vs log n slope: {slope:.3f}")
    return 0


def cmd_build_dataset(cfg: dict, out: Path) -> int:
    if not cfg["preset"] or not cfg["table"]:
        raise ValueError("build-dataset needs --preset and --table")
    table = datatools.read_table_csv(cfg["table"])
    preset = cfg["preset"]
    common = {"T": cfg["T"], "seed": cfg["seed"], "test_fraction": cfg["test_fraction"]}
    if preset.endswith("gradual"):
        if preset == "nsgo-gradual":
            table = datatools.min_divergence_filter(table, cfg["threshold"])
        rows = datatools.gradual_interpolation(table, t_start=cfg["t_start"], t_end=cfg["t_end"], **common)
    else:
        rows = datatools.changepoint_assignment(table, t_cp=cfg["tcp"], rho_diff=cfg["rho"], n_rows=cfg["n_rows"], **common)
    datatools.write_rows_jsonl(rows, out / "rows.jsonl")
    counts = {"train": sum(r.split == "train" for r in rows), "test": sum(r.split == "test" for r in rows)}
    _write_manifest(out, "build-dataset", cfg, row_counts=counts)
    print(f"{preset}: {counts['train']} train and {counts['test']} test rows")
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    if not cfg["params"]:
        raise ValueError("eval needs --params")
    params_path = Path(cfg["params"])
    with open(params_path) as fh:
        params = json.load(fh)
    theta = np.asarray(params["theta"], dtype=float)
    env = Environment(**params["env"])
    run_id = cfg["run_id"] or params.get("run_id") or params_path.parent.name
    records = []
    if cfg["data"]:
        test = read_test_set_jsonl(Path(cfg["data"]) / "test.jsonl")
        acc = reward_accuracy(theta, None, test, env.tau)
        records.append({"run_id": run_id, "metric": "reward_accuracy", "value": acc, "std_error": math.sqrt(acc * (1 - acc) / len(test))})
    if params.get("schedule"):
        schedule = DriftSchedule.from_dict(params["schedule"])
        reg = expected_regret(theta, schedule, env, cfg["regret_contexts"], cfg["seed"])
        records.append({"run_id": run_id, "metric": "expected_regret", "value": reg.value, "std_error": reg.std_error})
    if not records:
        raise ValueError("nothing to evaluate: pass --data or use params with a known schedule")
    _write_manifest(out, "eval", cfg)
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
            print(json.dumps(rec))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bound-study": cmd_bound_study,
    "build-dataset": cmd_build_dataset,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    logging.basicConfig(level=logging.INFO if args.pop("verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.pop("out", "."))
    try:
        cfg = resolve_config(command, args)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[command](cfg, out)
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"nsdpo {command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
