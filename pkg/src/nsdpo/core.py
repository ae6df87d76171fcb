"""Synthetic drifting-preference environment.

Contexts live in ``[0, 1]^d_x``, actions are integer indices, and the
feature of a (context, action) pair is the trigonometric embedding

    phi(x, a) = [(a+1) cos(pi x_0), sin(pi x_0)/(a+1), ..., (a+1) cos(pi x_{d_x-1}), sin(pi x_{d_x-1})/(a+1)]

Preferences between two actions follow a time-indexed Bradley-Terry model
whose reward is log-linear in ``phi`` with a drifting parameter ``theta*_t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from nsdpo._math import sigmoid

__all__ = [
    "Environment",
    "ConstantSegment",
    "CircularSegment",
    "DriftSchedule",
    "PolicyParams",
    "OfflineDataset",
    "TestSet",
    "feature_map",
    "feature_bound",
    "default_schedule",
    "stationary_schedule",
    "changepoint_schedule",
    "optimal_param",
    "preference_probability",
    "sample_dataset",
    "sample_test_set",
    "write_dataset_jsonl",
    "read_dataset_jsonl",
    "write_test_set_jsonl",
    "read_test_set_jsonl",
]

# Independent RNG substreams derived from one seed; fixed indices so that
# drawing a test set never perturbs the training draws.
_STREAM_CONTEXTS = 0
_STREAM_ACTIONS = 1
_STREAM_LABELS = 2
_STREAM_TEST = 3
_N_STREAMS = 4


def _substreams(seed: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(_N_STREAMS)
    return [np.random.default_rng(c) for c in children]


@dataclass(frozen=True)
class Environment:
    """Shape of the synthetic problem: context dimension, action count, KL coefficient."""

    d_x: int = 4
    n_actions: int = 16
    tau: float = 1.0

    def __post_init__(self):
        if self.d_x < 1:
            raise ValueError(f"d_x must be >= 1, got {self.d_x}")
        if self.n_actions < 2:
            raise ValueError(f"n_actions must be >= 2, got {self.n_actions}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def d(self) -> int:
        return 2 * self.d_x

    @property
    def feature_bound(self) -> float:
        return feature_bound(self.d_x, self.n_actions)

    def features(self, x, actions):
        return feature_map(x, actions)

    def all_features(self, x) -> np.ndarray:
        """Features of every action for each context: shape ``(n, n_actions, d)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        acts = np.arange(self.n_actions)
        return feature_map(x[:, None, :], acts[None, :])


def feature_map(x, action) -> np.ndarray:
    """Trigonometric feature embedding of (context, action) pairs.

    Broadcasts: ``x`` has shape ``(..., d_x)`` and ``action`` shape ``(...)``;
    the result has shape ``(..., 2 * d_x)``.
    """
    x = np.asarray(x, dtype=float)
    scale = np.asarray(action, dtype=float)[..., None] + 1.0
    angle = np.pi * x
    cos_part = np.cos(angle) * scale
    sin_part = np.sin(angle) / scale
    shape = np.broadcast_shapes(cos_part.shape, sin_part.shape)
    out = np.empty(shape[:-1] + (2 * shape[-1],))
    out[..., 0::2] = cos_part
    out[..., 1::2] = sin_part
    return out


def feature_bound(d_x: int, n_actions: int) -> float:
    """Upper bound ``L`` on ``||phi(x, a)||_2`` over the context cube and all actions.

    Each coordinate pair has squared norm at most ``max((a+1)^2, (a+1)^-2)``,
    attained at ``x_j in {0, 1}`` for ``a >= 1``.
    """
    worst = max(max(a + 1.0, 1.0 / (a + 1.0)) for a in range(n_actions))
    return math.sqrt(d_x) * worst


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray
    radius_W: float = math.inf

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", theta)
        if np.linalg.norm(theta) > self.radius_W * (1 + 1e-12):
            raise ValueError(f"||theta|| = {np.linalg.norm(theta):.6g} exceeds W = {self.radius_W}")


# ---------------------------------------------------------------------------
# drift schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantSegment:
    theta: tuple[float, ...]
    t_start: int
    t_end: int

    def value(self, t: int) -> np.ndarray:
        return np.asarray(self.theta, dtype=float)

    def to_dict(self) -> dict:
        return {"kind": "constant", "theta": list(self.theta), "t_start": self.t_start, "t_end": self.t_end}


@dataclass(frozen=True)
class CircularSegment:
    """Great-circle interpolation from ``theta_start`` to ``theta_end``.

    The interpolation fraction is ``(t - t_start + 1) / (t_end - t_start + 1)``,
    so the segment leaves ``theta_start`` one step after the previous segment
    ends and arrives at ``theta_end`` exactly at ``t_end``.  For orthogonal
    endpoints of equal norm this is ``cos(s pi/2) theta_start + sin(s pi/2) theta_end``.
    """

    theta_start: tuple[float, ...]
    theta_end: tuple[float, ...]
    t_start: int
    t_end: int

    def value(self, t: int) -> np.ndarray:
        s = (t - self.t_start + 1) / (self.t_end - self.t_start + 1)
        a = np.asarray(self.theta_start, dtype=float)
        b = np.asarray(self.theta_end, dtype=float)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return (1 - s) * a + s * b
        ua, ub = a / na, b / nb
        omega = math.acos(float(np.clip(ua @ ub, -1.0, 1.0)))
        if omega < 1e-12:
            direction = ua
        else:
            direction = (math.sin((1 - s) * omega) * ua + math.sin(s * omega) * ub) / math.sin(omega)
        return ((1 - s) * na + s * nb) * direction

    def to_dict(self) -> dict:
        return {
            "kind": "circular",
            "theta_start": list(self.theta_start),
            "theta_end": list(self.theta_end),
            "t_start": self.t_start,
            "t_end": self.t_end,
        }


def _segment_from_dict(d: dict):
    kind = d["kind"]
    if kind == "constant":
        return ConstantSegment(tuple(d["theta"]), int(d["t_start"]), int(d["t_end"]))
    if kind == "circular":
        return CircularSegment(tuple(d["theta_start"]), tuple(d["theta_end"]), int(d["t_start"]), int(d["t_end"]))
    raise ValueError(f"unknown segment kind {kind!r}")


@dataclass(frozen=True)
class DriftSchedule:
    """Piecewise definition of the optimal parameter over time steps ``1..T``."""

    segments: tuple
    T: int
    name: str = "custom"

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("schedule needs at least one segment")
        expected = 1
        for seg in segs:
            if seg.t_start != expected:
                raise ValueError(f"segment starting at {seg.t_start} leaves a gap or overlap (expected {expected})")
            if seg.t_end < seg.t_start:
                raise ValueError(f"segment [{seg.t_start}, {seg.t_end}] is empty")
            expected = seg.t_end + 1
        if expected - 1 != self.T:
            raise ValueError(f"segments cover [1, {expected - 1}] but horizon is T = {self.T}")
        dims = {len(self.theta_at(s.t_start)) for s in segs}
        if len(dims) != 1:
            raise ValueError("segments disagree on parameter dimension")

    @property
    def d(self) -> int:
        return len(self.theta_at(1))

    def theta_at(self, t: int) -> np.ndarray:
        for seg in self.segments:
            if seg.t_start <= t <= seg.t_end:
                return seg.value(t)
        raise ValueError(f"time step {t} outside [1, {self.T}]")

    def thetas(self, ts: Iterable[int] | None = None) -> np.ndarray:
        """Stack of ``theta*_t`` for the given steps (default ``1..T``)."""
        if ts is None:
            ts = range(1, self.T + 1)
        ts = np.asarray(list(ts) if not isinstance(ts, np.ndarray) else ts, dtype=int)
        table = {t: self.theta_at(t) for t in np.unique(ts)}
        return np.stack([table[t] for t in ts]) if len(ts) else np.empty((0, self.d))

    def max_norm(self) -> float:
        return float(np.linalg.norm(self.thetas(), axis=1).max())

    def is_stationary(self) -> bool:
        th = self.thetas()
        return bool(np.all(th == th[0]))

    def to_dict(self) -> dict:
        return {"name": self.name, "T": self.T, "segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "DriftSchedule":
        return cls(tuple(_segment_from_dict(s) for s in d["segments"]), int(d["T"]), d.get("name", "custom"))


def _pairs(c: float, s: float, d_x: int) -> tuple[float, ...]:
    return tuple([c, s] * d_x)


def default_schedule(T: int = 101, d_x: int = 4, t_first: int = 33, t_second: int = 66) -> DriftSchedule:
    """Constant ``(1,0,...)`` up to ``t_first``, quarter-circle rotation, then ``(0,1,...)``."""
    if not 1 <= t_first < t_second < T:
        raise ValueError("need 1 <= t_first < t_second < T")
    start, end = _pairs(1.0, 0.0, d_x), _pairs(0.0, 1.0, d_x)
    segs = (
        ConstantSegment(start, 1, t_first),
        CircularSegment(start, end, t_first + 1, t_second),
        ConstantSegment(end, t_second + 1, T),
    )
    return DriftSchedule(segs, T, name="rotation")


def stationary_schedule(T: int = 101, theta: Sequence[float] | None = None, d_x: int = 4) -> DriftSchedule:
    theta = tuple(theta) if theta is not None else _pairs(1.0, 0.0, d_x)
    return DriftSchedule((ConstantSegment(tuple(float(v) for v in theta), 1, T),), T, name="stationary")


def changepoint_schedule(T: int, t_cp: int, theta_before: Sequence[float], theta_after: Sequence[float]) -> DriftSchedule:
    """``theta_before`` for ``t < t_cp`` and ``theta_after`` from ``t_cp`` on."""
    if not 2 <= t_cp <= T:
        raise ValueError("need 2 <= t_cp <= T")
    segs = (
        ConstantSegment(tuple(float(v) for v in theta_before), 1, t_cp - 1),
        ConstantSegment(tuple(float(v) for v in theta_after), t_cp, T),
    )
    return DriftSchedule(segs, T, name="changepoint")


def optimal_param(schedule: DriftSchedule, t: int) -> PolicyParams:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"time step {t} outside [1, {schedule.T}]")
    return PolicyParams(schedule.theta_at(t))


def preference_probability(x, a1, a2, theta_star, theta_ref=None, tau: float = 1.0):
    """Probability that ``a1`` is preferred to ``a2`` under a log-linear reward.

    Vectorised over leading axes of ``x``/``a1``/``a2``.
    """
    theta_star = np.asarray(getattr(theta_star, "theta", theta_star), dtype=float)
    theta_ref = np.zeros_like(theta_star) if theta_ref is None else np.asarray(getattr(theta_ref, "theta", theta_ref), dtype=float)
    if np.any(np.asarray(a1) == np.asarray(a2)):
        raise ValueError("preference_probability needs two distinct actions")
    phi_diff = feature_map(x, a1) - feature_map(x, a2)
    return sigmoid(tau * (phi_diff @ (theta_star - theta_ref)))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class OfflineDataset:
    """Time-stamped pairwise preferences.

    ``first``/``second`` hold the action pair in sampled order and ``label``
    is 1 when ``first`` won.  ``winners``/``losers`` give the winner-first view.
    """

    x: np.ndarray
    first: np.ndarray
    second: np.ndarray
    t: np.ndarray
    label: np.ndarray
    T: int
    env: Environment = field(default_factory=Environment)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.first = np.asarray(self.first, dtype=np.int64)
        self.second = np.asarray(self.second, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=float)
        n = len(self.t)
        if not (self.x.shape[0] == len(self.first) == len(self.second) == len(self.label) == n):
            raise ValueError("dataset arrays must share their first dimension")
        if n and np.any(self.first == self.second):
            raise ValueError("winner and loser must differ")
        if n and (self.t.min() < 1 or self.t.max() > self.T - 1):
            raise ValueError(f"time steps must lie in [1, {self.T - 1}]")
        if n and np.any(np.diff(self.t) < 0):
            raise ValueError("datapoints must be sorted by time step")

    def __len__(self) -> int:
        return len(self.t)

    @cached_property
    def phi_diff(self) -> np.ndarray:
        return feature_map(self.x, self.first) - feature_map(self.x, self.second)

    @property
    def winners(self) -> np.ndarray:
        return np.where(self.label == 1, self.first, self.second)

    @property
    def losers(self) -> np.ndarray:
        return np.where(self.label == 1, self.second, self.first)

    def counts_per_step(self) -> np.ndarray:
        """Number of datapoints at each step ``1..T-1``."""
        return np.bincount(self.t, minlength=self.T)[1:]

    def subset(self, mask) -> "OfflineDataset":
        mask = np.asarray(mask)
        return OfflineDataset(self.x[mask], self.first[mask], self.second[mask], self.t[mask], self.label[mask], self.T, self.env, dict(self.meta))

    def swapped(self) -> "OfflineDataset":
        """Same preferences with each pair stored in the opposite order."""
        return OfflineDataset(self.x, self.second, self.first, self.t, 1.0 - self.label, self.T, self.env, dict(self.meta))


@dataclass
class TestSet:
    """Held-out pairs at the evaluation step, with exact preference probabilities."""

    __test__ = False  # keep pytest from collecting this class

    x: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    p_true: np.ndarray
    t: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.p_true)

    @cached_property
    def phi_diff(self) -> np.ndarray:
        return feature_map(self.x, self.a1) - feature_map(self.x, self.a2)


def _distinct_pairs(rng: np.random.Generator, n: int, n_actions: int) -> tuple[np.ndarray, np.ndarray]:
    # uniform over ordered pairs without replacement
    a1 = rng.integers(0, n_actions, size=n)
    a2 = rng.integers(0, n_actions - 1, size=n)
    a2 = a2 + (a2 >= a1)
    return a1, a2


def sample_dataset(
    schedule: DriftSchedule,
    points_per_step: int = 20,
    env: Environment | None = None,
    seed: int = 0,
    theta_ref=None,
) -> OfflineDataset:
    """Draw ``points_per_step`` labelled pairs at every step ``1..T-1``."""
    env = env or Environment(d_x=schedule.d // 2)
    if points_per_step < 1:
        raise ValueError("points_per_step must be >= 1")
    if schedule.d != env.d:
        raise ValueError(f"schedule dimension {schedule.d} does not match feature dimension {env.d}")
    rng_x, rng_a, rng_o, _ = _substreams(seed)
    T = schedule.T
    t = np.repeat(np.arange(1, T, dtype=np.int64), points_per_step)
    n = len(t)
    x = rng_x.random((n, env.d_x))
    a1, a2 = _distinct_pairs(rng_a, n, env.n_actions)
    theta_ref = np.zeros(env.d) if theta_ref is None else np.asarray(theta_ref, dtype=float)
    logits = env.tau * np.einsum("ij,ij->i", feature_map(x, a1) - feature_map(x, a2), schedule.thetas(t) - theta_ref)
    label = (rng_o.random(n) < sigmoid(logits)).astype(float)
    meta = {
        "d_x": env.d_x,
        "n_actions": env.n_actions,
        "T": T,
        "tau": env.tau,
        "points_per_step": points_per_step,
        "schedule": schedule.to_dict(),
        "seed": seed,
    }
    return OfflineDataset(x, a1, a2, t, label, T, env, meta)


def sample_test_set(
    schedule: DriftSchedule,
    n_test: int = 100,
    env: Environment | None = None,
    seed: int = 0,
    at_step: int | None = None,
    theta_ref=None,
) -> TestSet:
    env = env or Environment(d_x=schedule.d // 2)
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    at_step = schedule.T if at_step is None else at_step
    rng = _substreams(seed)[_STREAM_TEST]
    x = rng.random((n_test, env.d_x))
    a1, a2 = _distinct_pairs(rng, n_test, env.n_actions)
    p = preference_probability(x, a1, a2, schedule.theta_at(at_step), theta_ref, env.tau)
    meta = {"d_x": env.d_x, "n_actions": env.n_actions, "T": schedule.T, "tau": env.tau, "seed": seed, "at_step": at_step}
    return TestSet(x, a1, a2, p, at_step, meta)


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def write_dataset_jsonl(dataset: OfflineDataset, path) -> None:
    header = {
        "d_x": dataset.env.d_x,
        "n_actions": dataset.env.n_actions,
        "T": dataset.T,
        "tau": dataset.env.tau,
        "schedule_descriptor": dataset.meta.get("schedule"),
        "seed": dataset.meta.get("seed"),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": header}) + "\n")
        for i in range(len(dataset)):
            rec = {
                "x": [float(v) for v in dataset.x[i]],
                "winner": int(dataset.first[i]),
                "loser": int(dataset.second[i]),
                "t": int(dataset.t[i]),
                "label": int(dataset.label[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset_jsonl(path) -> OfflineDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())["header"]
        rows = [json.loads(line) for line in fh if line.strip()]
    env = Environment(header["d_x"], header["n_actions"], header["tau"])
    meta = {"schedule": header.get("schedule_descriptor"), "seed": header.get("seed"), **{k: header[k] for k in ("d_x", "n_actions", "T", "tau")}}
    if not rows:
        return OfflineDataset(np.empty((0, env.d_x)), [], [], [], [], header["T"], env, meta)
    return OfflineDataset(
        np.array([r["x"] for r in rows]),
        [r["winner"] for r in rows],
        [r["loser"] for r in rows],
        [r["t"] for r in rows],
        [r["label"] for r in rows],
        header["T"],
        env,
        meta,
    )


def write_test_set_jsonl(test_set: TestSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": {**test_set.meta, "t": test_set.t}}) + "\n")
        for i in range(len(test_set)):
            rec = {"x": [float(v) for v in test_set.x[i]], "a1": int(test_set.a1[i]), "a2": int(test_set.a2[i]), "p_true": float(test_set.p_true[i])}
            fh.write(json.dumps(rec) + "\n")


def read_test_set_jsonl(path) -> TestSet:
    with open(path) as fh:
        header = json.loads(fh.readline())["header"]
        rows = [json.loads(line) for line in fh if line.strip()]
    t = header.pop("t")
    return TestSet(np.array([r["x"] for r in rows]), np.array([r["a1"] for r in rows]), np.array([r["a2"] for r in rows]), np.array([r["p_true"] for r in rows]), t, header)
