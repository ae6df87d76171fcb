"""Full-batch gradient descent and projection onto the parameter ball."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from nsdpo._math import sigmoid
from nsdpo.core import OfflineDataset, TestSet
from nsdpo.metrics import reward_accuracy, weighted_covariance
from nsdpo.objectives import NonFiniteError, ObjectiveConfig, grad, implicit_reward_diff, loss, objective_weights

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainTrace", "ProjectionResult", "train", "g_tau", "project_params"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    steps: int = 1000
    normalize_gradient: bool = True
    init_theta: tuple | str = "zeros"
    eval_every: int = 1
    seed: int = 0
    keep_theta: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(d["init_theta"], str):
            d["init_theta"] = list(d["init_theta"])
        return d


@dataclass
class TrainTrace:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    reward_accuracy: list = field(default_factory=list)
    theta: list = field(default_factory=list)

    COLUMNS = ("step", "loss", "grad_norm", "reward_accuracy")

    def record(self, step, loss_value, grad_norm, acc, theta=None):
        if self.step and step <= self.step[-1]:
            raise ValueError("checkpoints must be strictly increasing")
        self.step.append(int(step))
        self.loss.append(float(loss_value))
        self.grad_norm.append(float(grad_norm))
        self.reward_accuracy.append(float("nan") if acc is None else float(acc))
        if theta is not None:
            self.theta.append([float(v) for v in theta])

    def rows(self):
        return [dict(zip(self.COLUMNS, r)) for r in zip(self.step, self.loss, self.grad_norm, self.reward_accuracy)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    @classmethod
    def from_csv(cls, path) -> "TrainTrace":
        trace = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                trace.record(int(row["step"]), float(row["loss"]), float(row["grad_norm"]), float(row["reward_accuracy"]))
        return trace


def _init_theta(cfg: TrainConfig, d: int) -> np.ndarray:
    if isinstance(cfg.init_theta, str):
        if cfg.init_theta != "zeros":
            raise ValueError(f"unknown init {cfg.init_theta!r}")
        return np.zeros(d)
    theta = np.asarray(cfg.init_theta, dtype=float)
    if theta.shape != (d,):
        raise ValueError(f"init_theta has shape {theta.shape}, expected ({d},)")
    return theta.copy()


def train(
    objective: str,
    dataset: OfflineDataset,
    objective_config: ObjectiveConfig,
    train_config: TrainConfig,
    T: int | None = None,
    test_set: TestSet | None = None,
    theta_ref=None,
):
    """Run deterministic full-batch descent; return the final parameter and its trace.

    With ``normalize_gradient`` the update is ``theta -= lr * g / ||g||`` (a zero
    gradient leaves ``theta`` unchanged).  Checkpoints are recorded at step 0 and
    every ``eval_every`` steps after, always including the last step.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    T = dataset.T if T is None else T
    objective_weights(objective, dataset, objective_config, T)  # surfaces empty-window errors up front
    d = dataset.phi_diff.shape[1]
    theta = _init_theta(train_config, d)
    trace = TrainTrace()

    def checkpoint(step, g):
        value = loss(objective, theta, dataset, objective_config, T, theta_ref).value
        acc = reward_accuracy(theta, theta_ref, test_set, objective_config.tau) if test_set is not None else None
        trace.record(step, value, np.linalg.norm(g), acc, theta if train_config.keep_theta else None)

    for step in range(train_config.steps + 1):
        try:
            g = grad(objective, theta, dataset, objective_config, T, theta_ref)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{objective} step {step}: {exc}; ||theta|| = {np.linalg.norm(theta):.4g}") from exc
        if step % train_config.eval_every == 0 or step == train_config.steps:
            checkpoint(step, g)
        if step == train_config.steps:
            break
        if train_config.normalize_gradient:
            norm = np.linalg.norm(g)
            if norm > 0:
                theta = theta - train_config.learning_rate * g / norm
        else:
            theta = theta - train_config.learning_rate * g
    return theta, trace


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


@dataclass
class ProjectionResult:
    theta: np.ndarray
    objective: float
    iterations: int
    converged: bool


def g_tau(theta, phi_diff, weights, n, config: ObjectiveConfig, theta_ref=None) -> np.ndarray:
    """Parameter-dependent part of the gradient: ``1/n sum tau w s(h) phi + lambda c tau^2 theta``."""
    h = implicit_reward_diff(theta, theta_ref, phi_diff, config.tau)
    return (config.tau * weights * sigmoid(h)) @ phi_diff / n + config.lam * config.c_sigma * config.tau**2 * np.asarray(theta, dtype=float)


def _ball(theta, radius):
    nrm = np.linalg.norm(theta)
    return theta if nrm <= radius else theta * (radius / nrm)


def project_params(
    theta_hat,
    dataset: OfflineDataset,
    objective_config: ObjectiveConfig,
    radius_W: float,
    T: int | None = None,
    objective: str = "nsdpo",
    theta_ref=None,
    max_iter: int = 500,
    tol: float = 1e-8,
) -> ProjectionResult:
    """Admissible parameter closest to ``theta_hat`` in the ``g_tau`` geometry.

    Minimises ``||g_tau(theta_hat) - g_tau(theta)||`` in the ``(Sigma_hat + lambda I)^-1``
    norm over the ball ``||theta|| <= radius_W`` with projected gradient descent and
    backtracking.  ``theta_hat`` already inside the ball is returned unchanged.
    """
    lam = objective_config.lam
    if not lam > 0:
        raise ValueError("projection needs lambda > 0")
    theta_hat = np.asarray(theta_hat, dtype=float)
    T = dataset.T if T is None else T
    w, n = objective_weights(objective, dataset, objective_config, T)
    phi = dataset.phi_diff
    d = phi.shape[1]
    A = weighted_covariance(phi, w, n) + lam * np.eye(d)
    target = g_tau(theta_hat, phi, w, n, objective_config, theta_ref)
    tau = objective_config.tau

    def value_and_grad(theta):
        r = g_tau(theta, phi, w, n, objective_config, theta_ref) - target
        Ar = np.linalg.solve(A, r)
        h = implicit_reward_diff(theta, theta_ref, phi, tau)
        s = sigmoid(h)
        jac = weighted_covariance(phi, tau**2 * w * s * (1 - s), n) + lam * objective_config.c_sigma * tau**2 * np.eye(d)
        return float(r @ Ar), 2.0 * jac @ Ar

    if np.linalg.norm(theta_hat) <= radius_W:
        return ProjectionResult(theta_hat.copy(), 0.0, 0, True)

    theta = _ball(theta_hat, radius_W)
    f, g = value_and_grad(theta)
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        while True:
            cand = _ball(theta - step * g, radius_W)
            f_c, g_c = value_and_grad(cand)
            # sufficient decrease along the projected arc
            if f_c <= f - (0.5 / step) * float((cand - theta) @ (cand - theta)) or step < 1e-20:
                break
            step *= 0.5
        decrease = f - f_c
        if f_c <= f:
            theta, f, g = cand, f_c, g_c
        if decrease <= tol * max(1.0, abs(f)) and decrease >= 0:
            converged = True
            break
        step = min(step * 2.0, 1e12)
    if not converged:
        log.warning("projection stopped after %d iterations without meeting tol=%g", it, tol)
    # squared objective internally; report the norm
    return ProjectionResult(theta, math.sqrt(max(f, 0.0)), it, converged)
