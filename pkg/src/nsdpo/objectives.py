"""NS-DPO, DPO and SW-DPO objectives for log-linear policies.

For a log-linear policy ``pi_theta(a|x) ∝ exp(phi(x, a)^T theta)`` the
implicit reward difference is ``h = tau <phi(x,a) - phi(x,a'), theta - theta_ref>``
(the partition functions cancel).  All three objectives share the labelled,
mean-normalised form

    L(theta) = 1/N sum_i w_i [-o_i log s(h_i) - (1 - o_i) log s(-h_i)] + lambda c tau^2/2 ||theta||^2

and differ only in the per-point weights ``w_i``:

* ``nsdpo``: ``gamma^(T - t_i - 1)``, ``N = n``
* ``dpo``: all ones, ``N = n``
* ``swdpo``: indicator of ``t_i >= T - w``, ``N`` = number of points in the window
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from nsdpo._math import sigmoid, softplus
from nsdpo.core import OfflineDataset

__all__ = [
    "ObjectiveConfig",
    "LossReport",
    "EmptyWindowError",
    "NonFiniteError",
    "OBJECTIVES",
    "discount_weights",
    "window_weights",
    "objective_weights",
    "implicit_reward_diff",
    "loss",
    "grad",
    "hessian",
    "nsdpo_loss",
    "nsdpo_grad",
    "dpo_loss",
    "dpo_grad",
    "swdpo_loss",
    "swdpo_grad",
]

OBJECTIVES = ("dpo", "nsdpo", "swdpo")


class EmptyWindowError(ValueError):
    """No datapoint falls inside the sliding window."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient evaluated to inf/nan."""


@dataclass(frozen=True)
class ObjectiveConfig:
    tau: float = 1.0
    gamma: float = 1.0
    lam: float = 0.0
    window_w: int | None = None
    c_sigma: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.window_w is not None and self.window_w < 1:
            raise ValueError("window_w must be >= 1")
        if not self.c_sigma > 0:
            raise ValueError("c_sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    value: float
    per_point_weights: np.ndarray

    def to_dict(self) -> dict:
        return {"value": self.value, "per_point_weights": [float(w) for w in self.per_point_weights]}


def discount_weights(t, T: int, gamma: float) -> np.ndarray:
    return np.power(float(gamma), (T - 1 - np.asarray(t, dtype=float)))


def window_weights(t, T: int, window_w: int) -> np.ndarray:
    # inclusive boundary: t >= T - w
    return (np.asarray(t) >= T - window_w).astype(float)


def objective_weights(objective: str, dataset: OfflineDataset, config: ObjectiveConfig, T: int | None = None):
    """Per-point weights and the normaliser ``N`` for ``objective``."""
    T = dataset.T if T is None else T
    if len(dataset) and np.max(dataset.t) >= T:
        raise ValueError("every datapoint must satisfy t_i < T")
    if objective == "nsdpo":
        w = discount_weights(dataset.t, T, config.gamma)
        return w, len(dataset)
    if objective == "dpo":
        return np.ones(len(dataset)), len(dataset)
    if objective == "swdpo":
        if config.window_w is None:
            raise ValueError("swdpo needs window_w")
        w = window_weights(dataset.t, T, config.window_w)
        count = int(w.sum())
        if count == 0:
            raise EmptyWindowError(f"no datapoint has t >= T - w = {T - config.window_w}")
        return w, count
    raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def implicit_reward_diff(theta, theta_ref, phi_diff, tau: float):
    """``h_theta = tau <phi_diff, theta - theta_ref>`` (vectorised over rows of ``phi_diff``)."""
    theta = np.asarray(theta, dtype=float)
    ref = np.zeros_like(theta) if theta_ref is None else np.asarray(theta_ref, dtype=float)
    return tau * (np.asarray(phi_diff, dtype=float) @ (theta - ref))


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite {what}: {value}")
    return value


def loss(objective: str, theta, dataset: OfflineDataset, config: ObjectiveConfig, T: int | None = None, theta_ref=None) -> LossReport:
    w, norm = objective_weights(objective, dataset, config, T)
    theta = np.asarray(theta, dtype=float)
    h = implicit_reward_diff(theta, theta_ref, dataset.phi_diff, config.tau)
    o = dataset.label
    # -log s(h) = softplus(-h)
    nll = o * softplus(-h) + (1.0 - o) * softplus(h)
    value = float(w @ nll) / norm + 0.5 * config.lam * config.c_sigma * config.tau**2 * float(theta @ theta)
    return LossReport(_check_finite(value, "loss"), w)


def grad(objective: str, theta, dataset: OfflineDataset, config: ObjectiveConfig, T: int | None = None, theta_ref=None) -> np.ndarray:
    w, norm = objective_weights(objective, dataset, config, T)
    theta = np.asarray(theta, dtype=float)
    h = implicit_reward_diff(theta, theta_ref, dataset.phi_diff, config.tau)
    resid = config.tau * w * (sigmoid(h) - dataset.label)
    g = resid @ dataset.phi_diff / norm + config.lam * config.c_sigma * config.tau**2 * theta
    return _check_finite(g, "gradient")


def hessian(objective: str, theta, dataset: OfflineDataset, config: ObjectiveConfig, T: int | None = None, theta_ref=None) -> np.ndarray:
    w, norm = objective_weights(objective, dataset, config, T)
    h = implicit_reward_diff(theta, theta_ref, dataset.phi_diff, config.tau)
    s = sigmoid(h)
    coef = config.tau**2 * w * s * (1.0 - s) / norm
    H = (dataset.phi_diff * coef[:, None]).T @ dataset.phi_diff
    return H + config.lam * config.c_sigma * config.tau**2 * np.eye(len(theta))


def nsdpo_loss(theta, dataset, config, T=None, theta_ref=None):
    return loss("nsdpo", theta, dataset, config, T, theta_ref)


def nsdpo_grad(theta, dataset, config, T=None, theta_ref=None):
    return grad("nsdpo", theta, dataset, config, T, theta_ref)


def dpo_loss(theta, dataset, config, T=None, theta_ref=None):
    return loss("dpo", theta, dataset, config, T, theta_ref)


def dpo_grad(theta, dataset, config, T=None, theta_ref=None):
    return grad("dpo", theta, dataset, config, T, theta_ref)


def swdpo_loss(theta, dataset, config, T=None, theta_ref=None):
    return loss("swdpo", theta, dataset, config, T, theta_ref)


def swdpo_grad(theta, dataset, config, T=None, theta_ref=None):
    return grad("swdpo", theta, dataset, config, T, theta_ref)
