"""Experiment harness: data generation, training cells, sweeps and bound studies."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from nsdpo.core import DriftSchedule, Environment, default_schedule, sample_dataset, sample_test_set, stationary_schedule
from nsdpo.metrics import condition_number_kappa, estimation_error, expected_regret
from nsdpo.objectives import ObjectiveConfig
from nsdpo.optimizer import TrainConfig, TrainTrace, project_params, train
from nsdpo.theory import TheoryConfig, error_decomposition, estimation_bound_rhs, gamma_from_budget, nonlinearity_coeffs, variation_budget

log = logging.getLogger(__name__)

__all__ = [
    "SCHEDULES",
    "ExperimentConfig",
    "Cell",
    "CellResult",
    "make_schedule",
    "make_data",
    "run_cell",
    "run_cells",
    "aggregate",
    "summarize",
    "steps_to_fraction",
    "steps_to_reach",
    "bound_study",
]

SCHEDULES = ("rotation", "stationary")


@dataclass(frozen=True)
class ExperimentConfig:
    d_x: int = 4
    n_actions: int = 16
    T: int = 101
    points_per_step: int = 20
    n_test: int = 100
    tau: float = 1.0
    schedule: str = "rotation"
    lam: float = 0.0
    learning_rate: float = 0.01
    steps: int = 1000
    eval_every: int = 10
    normalize_gradient: bool = True

    @property
    def env(self) -> Environment:
        return Environment(self.d_x, self.n_actions, self.tau)

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.steps, self.normalize_gradient, "zeros", self.eval_every, seed)

    def to_dict(self) -> dict:
        return asdict(self)


def make_schedule(name: str, T: int = 101, d_x: int = 4) -> DriftSchedule:
    if name == "rotation":
        # change points at a third and two thirds of the horizon (33 and 66 for T = 101)
        if T < 4:
            raise ValueError("the rotation schedule needs T >= 4")
        t_first = max(1, round(0.33 * (T - 1)))
        t_second = min(T - 1, max(t_first + 1, round(0.66 * (T - 1))))
        return default_schedule(T, d_x, t_first, t_second)
    if name == "stationary":
        return stationary_schedule(T, d_x=d_x)
    raise ValueError(f"unknown schedule {name!r}; expected one of {SCHEDULES}")


def make_data(cfg: ExperimentConfig, seed: int):
    schedule = make_schedule(cfg.schedule, cfg.T, cfg.d_x)
    env = cfg.env
    return schedule, sample_dataset(schedule, cfg.points_per_step, env, seed), sample_test_set(schedule, cfg.n_test, env, seed)


@dataclass(frozen=True)
class Cell:
    objective: str
    seed: int
    gamma: float = 1.0
    window: int | None = None

    @property
    def method(self) -> str:
        if self.objective == "nsdpo":
            return f"nsdpo_gamma={self.gamma:g}"
        if self.objective == "swdpo":
            return f"swdpo_w={self.window}"
        return self.objective

    @property
    def cell_id(self) -> str:
        return f"{self.method}_seed={self.seed}"


@dataclass
class CellResult:
    cell: Cell
    theta: np.ndarray
    trace: TrainTrace

    @property
    def final_accuracy(self) -> float:
        return self.trace.reward_accuracy[-1]


def run_cell(cfg: ExperimentConfig, cell: Cell) -> CellResult:
    _, dataset, test = make_data(cfg, cell.seed)
    obj_cfg = ObjectiveConfig(tau=cfg.tau, gamma=cell.gamma, lam=cfg.lam, window_w=cell.window)
    theta, trace = train(cell.objective, dataset, obj_cfg, cfg.train_config(cell.seed), cfg.T, test)
    return CellResult(cell, theta, trace)


def _run_cell_safe(args):
    cfg, cell = args
    try:
        return run_cell(cfg, cell), None
    except Exception as exc:  # reported per cell, never aborts the sweep
        return None, f"{type(exc).__name__}: {exc}"


def run_cells(cfg: ExperimentConfig, cells, jobs: int = 1):
    """Run every cell; return ``(results, failures)`` with failures keyed by cell id."""
    cells = list(cells)
    work = [(cfg, c) for c in cells]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_safe, work))
    else:
        outcomes = [_run_cell_safe(w) for w in work]
    results, failures = [], {}
    for cell, (res, err) in zip(cells, outcomes):
        if err is None:
            results.append(res)
        else:
            failures[cell.cell_id] = err
    return results, failures


def _group(results):
    groups: dict[str, list[CellResult]] = {}
    for r in results:
        groups.setdefault(r.cell.method, []).append(r)
    return groups


def aggregate(results) -> list[dict]:
    """Per method and checkpoint: mean and std (over seeds) of accuracy and loss."""
    rows = []
    for method, group in _group(results).items():
        steps = group[0].trace.step
        acc = np.array([g.trace.reward_accuracy for g in group])
        lss = np.array([g.trace.loss for g in group])
        for k, step in enumerate(steps):
            rows.append(
                {
                    "method": method,
                    "step": step,
                    "mean_accuracy": float(acc[:, k].mean()),
                    "std_accuracy": float(acc[:, k].std()),
                    "mean_loss": float(lss[:, k].mean()),
                    "std_loss": float(lss[:, k].std()),
                    "n_seeds": len(group),
                }
            )
    return rows


def mean_curves(results) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``method -> (steps, seed-mean accuracy)``."""
    out = {}
    for method, group in _group(results).items():
        out[method] = (np.array(group[0].trace.step), np.mean([g.trace.reward_accuracy for g in group], axis=0))
    return out


def steps_to_reach(steps, curve, level: float) -> float:
    """First checkpoint at which ``curve >= level`` (``inf`` if never)."""
    hit = np.flatnonzero(np.asarray(curve) >= level - 1e-12)
    return float(np.asarray(steps)[hit[0]]) if hit.size else math.inf


def steps_to_fraction(steps, curve, fraction: float = 0.95) -> float:
    return steps_to_reach(steps, curve, fraction * float(np.asarray(curve)[-1]))


def summarize(results) -> list[dict]:
    rows = []
    for method, (steps, curve) in mean_curves(results).items():
        finals = [g.final_accuracy for g in _group(results)[method]]
        rows.append(
            {
                "method": method,
                "final_mean_accuracy": float(curve[-1]),
                "final_std_accuracy": float(np.std(finals)),
                "steps_to_95pct_of_final": steps_to_fraction(steps, curve, 0.95),
                "n_seeds": len(finals),
            }
        )
    return rows


def bound_study(
    cfg: ExperimentConfig,
    points_grid=(5, 20, 80),
    seeds=range(20),
    gamma: float | None = None,
    lam: float | None = None,
    delta: float = 0.1,
    C1: float = 1.0,
    C2: float = 0.5,
    regret_contexts: int = 2000,
) -> list[dict]:
    """Empirical estimation error next to the bound terms over a grid of dataset sizes.

    For each ``points_per_step`` and seed: train NS-DPO, project onto the
    ``W``-ball, and record the error norm, the learning/tracking terms from data,
    and the bound's right-hand side.  ``lam`` defaults to ``d / n``; ``gamma``
    defaults to the budget-derived discount (or 0.9 for a driftless schedule).
    """
    schedule = make_schedule(cfg.schedule, cfg.T, cfg.d_x)
    env = cfg.env
    B_T = variation_budget(schedule)
    W = schedule.max_norm()
    L = env.feature_bound
    coeffs = nonlinearity_coeffs(cfg.tau, L, W)
    if gamma is None:
        gamma = gamma_from_budget(B_T, env.d, cfg.T) if B_T > 0 else 0.9
    theta_T = schedule.theta_at(cfg.T)
    rows = []
    for m in points_grid:
        n = m * (cfg.T - 1)
        lam_n = env.d / n if lam is None else lam
        obj_cfg = ObjectiveConfig(cfg.tau, gamma, lam_n, None, coeffs.c_sigma)
        theory_cfg = TheoryConfig(W, L, cfg.tau, lam_n, delta, env.d, cfg.T, n, m, m, B_T, cfg.tau * 2 * L * W, C1, C2, 1.0)
        for seed in seeds:
            dataset = sample_dataset(schedule, m, env, seed)
            theta_hat, _ = train("nsdpo", dataset, obj_cfg, replace(cfg.train_config(seed), eval_every=cfg.steps), cfg.T)
            if lam_n > 0:
                proj = project_params(theta_hat, dataset, obj_cfg, W, cfg.T)
                theta_tilde = proj.theta
                err = estimation_error(theta_tilde, theta_T, dataset, gamma, cfg.T, lam_n)
            else:
                theta_tilde = theta_hat
                err = math.nan
            kappa = condition_number_kappa(theta_tilde, np.zeros(env.d), env, 40 * env.d**2, seed).kappa
            bound = estimation_bound_rhs(theory_cfg.replace(kappa=kappa), gamma)
            dec = error_decomposition(dataset, schedule, gamma, cfg.tau, lam_n, coeffs.c_sigma, cfg.T)
            regret = expected_regret(theta_tilde, schedule, env, regret_contexts, seed)
            rows.append(
                {
                    "n": n,
                    "T": cfg.T,
                    "gamma": gamma,
                    "B_T": B_T,
                    "seed": seed,
                    "lambda": lam_n,
                    "xi_learn": dec.xi_learn,
                    "xi_track": dec.xi_track,
                    "learning_term": bound.learning_term,
                    "tracking_term": bound.tracking_term,
                    "bound_rhs": bound.estimation_bound,
                    "regret_bound": bound.regret_bound,
                    "empirical_error": err,
                    "error_to_bound_ratio": err / bound.estimation_bound if bound.estimation_bound > 0 else math.nan,
                    "regret": regret.value,
                    "regret_std_error": regret.std_error,
                }
            )
    return rows
