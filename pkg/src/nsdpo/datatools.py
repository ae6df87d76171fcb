"""Turn two-source pairwise preference tables into time-stamped drifting datasets.

A preference table row carries the probability that response ``a`` beats
response ``b`` under two preference sources (e.g. two annotator groups or two
reward models).  The recipes here assign each row a time step and decide which
source, or which blend of the two, labels it.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from nsdpo._math import sigmoid

__all__ = [
    "TABLE_COLUMNS",
    "PreferenceRow",
    "TimedPreferenceRow",
    "TableError",
    "InsufficientDisagreement",
    "CHANGEPOINT_PRESETS",
    "plackett_luce_to_binary",
    "blend_probability",
    "gradual_interpolation",
    "changepoint_assignment",
    "min_divergence_filter",
    "hard_label",
    "read_table_csv",
    "write_table_csv",
    "write_rows_jsonl",
    "read_rows_jsonl",
    "write_manifest",
]

TABLE_COLUMNS = ("item_id", "prompt_key", "response_a_key", "response_b_key", "p_a_source_0", "p_a_source_1")
CHANGEPOINT_PRESETS = (51, 66, 81)


class TableError(ValueError):
    """Malformed preference table."""


class InsufficientDisagreement(ValueError):
    def __init__(self, requested: float, achievable: float):
        super().__init__(f"rho_diff = {requested} not reachable; at most {achievable:.6g} with the available rows")
        self.requested = requested
        self.achievable = achievable


@dataclass(frozen=True)
class PreferenceRow:
    item_id: str
    prompt_key: str
    response_a_key: str
    response_b_key: str
    p_a_source_0: float
    p_a_source_1: float

    def __post_init__(self):
        for name in ("p_a_source_0", "p_a_source_1"):
            p = getattr(self, name)
            if not (isinstance(p, (int, float)) and 0.0 <= p <= 1.0):
                raise TableError(f"row {self.item_id!r}: {name} = {p!r} is not a probability")


@dataclass(frozen=True)
class TimedPreferenceRow:
    item_id: str
    t: int
    label: int
    p_a_at_t: float
    split: str = "train"

    def to_dict(self) -> dict:
        return asdict(self)


def hard_label(p) -> np.ndarray:
    """1 where response ``a`` is preferred (``p > 1/2``)."""
    return (np.asarray(p) > 0.5).astype(int)


def plackett_luce_to_binary(probs) -> list[dict]:
    """Pairwise win probabilities implied by a Plackett-Luce choice distribution.

    Rewards are recovered (up to a constant) as ``log p``, so
    ``p(i beats j) = sigmoid(log p_i - log p_j) = p_i / (p_i + p_j)``.
    Responses with zero probability have no finite reward; their pairs are
    dropped with a warning.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or len(probs) < 2:
        raise ValueError("need a probability vector over at least two responses")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities must be nonnegative and sum to 1 (sum = {probs.sum():.8g})")
    zero = probs == 0
    if zero.any():
        warnings.warn(f"dropping pairs with zero-probability responses {np.flatnonzero(zero).tolist()}", stacklevel=2)
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    out = []
    for i in range(len(probs)):
        for j in range(len(probs)):
            if i == j or zero[i] or zero[j]:
                continue
            # the complement of a value in [1/2, 1] is exact, so p(i,j) + p(j,i) == 1
            larger = float(sigmoid(abs(logp[i] - logp[j])))
            out.append({"a": i, "b": j, "p_a": larger if logp[i] >= logp[j] else 1.0 - larger})
    return out


def _rows_arrays(table):
    p0 = np.array([r.p_a_source_0 for r in table], dtype=float)
    p1 = np.array([r.p_a_source_1 for r in table], dtype=float)
    return p0, p1


def _validate_table(table):
    for r in table:
        if not isinstance(r, PreferenceRow):
            raise TableError(f"expected PreferenceRow, got {type(r).__name__}")


def _split_test(table, test_fraction: float, rng, disjoint_prompts: bool):
    """Return index arrays (train, test); test prompts are disjoint from train prompts when requested."""
    n = len(table)
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    if test_fraction == 0:
        return np.arange(n), np.arange(0)
    if disjoint_prompts:
        prompts = sorted({r.prompt_key for r in table})
        order = rng.permutation(len(prompts))
        n_test = max(1, int(round(test_fraction * len(prompts))))
        test_prompts = {prompts[i] for i in order[:n_test]}
        is_test = np.array([r.prompt_key in test_prompts for r in table])
    else:
        is_test = np.zeros(n, dtype=bool)
        is_test[rng.permutation(n)[: max(1, int(round(test_fraction * n)))]] = True
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


def blend_probability(p0, p1, t, t_start: int, t_end: int):
    """Source 0 before ``t_start``, linear blend on ``[t_start, t_end)``, source 1 from ``t_end``."""
    t = np.asarray(t, dtype=float)
    s = np.clip((t - t_start) / (t_end - t_start), 0.0, 1.0)
    return (1.0 - s) * np.asarray(p0) + s * np.asarray(p1)


def gradual_interpolation(
    table,
    T: int = 101,
    t_start: int = 33,
    t_end: int = 66,
    seed: int = 0,
    test_fraction: float = 0.0,
    disjoint_prompts: bool = True,
) -> list[TimedPreferenceRow]:
    """Assign random training steps and sample labels from the blended probability.

    Test rows (if any) sit at ``t = T`` and follow source 1.
    """
    if not 1 <= t_start < t_end <= T:
        raise ValueError("need 1 <= t_start < t_end <= T")
    _validate_table(table)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _split_test(table, test_fraction, rng, disjoint_prompts)
    p0, p1 = _rows_arrays(table)
    t = rng.integers(1, T, size=len(train_idx))
    p_t = blend_probability(p0[train_idx], p1[train_idx], t, t_start, t_end)
    labels = (rng.random(len(train_idx)) < p_t).astype(int)
    order = np.argsort(t, kind="stable")
    rows = [TimedPreferenceRow(table[train_idx[k]].item_id, int(t[k]), int(labels[k]), float(p_t[k])) for k in order]
    test_labels = (rng.random(len(test_idx)) < p1[test_idx]).astype(int)
    rows += [TimedPreferenceRow(table[i].item_id, T, int(lab), float(p1[i]), "test") for i, lab in zip(test_idx, test_labels)]
    return rows


def _retained_counts(n_agree: int, n_disagree: int, rho: float, n_rows: int | None):
    if n_rows is not None:
        d = int(round(rho * n_rows))
        a = n_rows - d
        if d > n_disagree:
            raise InsufficientDisagreement(rho, min(n_disagree, n_rows) / n_rows)
        if a > n_agree:
            raise ValueError(f"rho_diff = {rho} needs {a} agreeing rows but only {n_agree} exist")
        return a, d
    total = n_agree + n_disagree
    if rho > 0 and n_disagree == 0:
        raise InsufficientDisagreement(rho, 0.0)
    if rho < 1 and n_agree == 0:
        raise ValueError(f"rho_diff = {rho} needs agreeing rows but every row disagrees")
    if total == 0:
        return 0, 0
    if rho == 1:
        return 0, n_disagree
    if n_disagree / total >= rho:
        a = n_agree
        d = int(round(rho * a / (1.0 - rho)))
    else:
        d = n_disagree
        a = int(round(d * (1.0 - rho) / rho))
    return min(a, n_agree), min(d, n_disagree)


def changepoint_assignment(
    table,
    T: int = 101,
    t_cp: int = 66,
    rho_diff: float = 1.0,
    seed: int = 0,
    n_rows: int | None = None,
    test_fraction: float = 0.0,
    disjoint_prompts: bool = True,
) -> list[TimedPreferenceRow]:
    """Hard labels from source 0 before ``t_cp`` and source 1 from ``t_cp`` on.

    Rows whose two sources disagree (hard labels at 1/2 differ) and rows that
    agree are subsampled so that disagreeing rows make up ``rho_diff`` of the
    training set.  Without ``n_rows`` the largest such subset is kept.
    Training steps are uniform on ``[1, T-1]``; test rows sit at ``T`` with
    source-1 labels.
    """
    if not 2 <= t_cp <= T:
        raise ValueError("need 2 <= t_cp <= T")
    if not 0 <= rho_diff <= 1:
        raise ValueError("rho_diff must lie in [0, 1]")
    _validate_table(table)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _split_test(table, test_fraction, rng, disjoint_prompts)
    p0, p1 = _rows_arrays(table)
    disagree = hard_label(p0) != hard_label(p1)
    agree_pool = rng.permutation(train_idx[~disagree[train_idx]])
    disagree_pool = rng.permutation(train_idx[disagree[train_idx]])
    a, d = _retained_counts(len(agree_pool), len(disagree_pool), rho_diff, n_rows)
    kept = np.concatenate([agree_pool[:a], disagree_pool[:d]]).astype(int)
    t = rng.integers(1, T, size=len(kept))
    order = np.argsort(t, kind="stable")
    rows = []
    for k in order:
        i = kept[k]
        p = p0[i] if t[k] < t_cp else p1[i]
        rows.append(TimedPreferenceRow(table[i].item_id, int(t[k]), int(hard_label(p)), float(p)))
    rows += [TimedPreferenceRow(table[i].item_id, T, int(hard_label(p1[i])), float(p1[i]), "test") for i in test_idx]
    return rows


def min_divergence_filter(table, threshold: float = 0.2):
    """Keep rows whose two sources differ by at least ``threshold``."""
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    return [r for r in table if abs(r.p_a_source_0 - r.p_a_source_1) >= threshold]


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------


def read_table_csv(path) -> list[PreferenceRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TABLE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise TableError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                p0, p1 = float(rec["p_a_source_0"]), float(rec["p_a_source_1"])
            except ValueError as exc:
                raise TableError(f"{path}:{lineno}: {exc}") from exc
            if not (math.isfinite(p0) and math.isfinite(p1)):
                raise TableError(f"{path}:{lineno}: non-finite probability")
            rows.append(PreferenceRow(rec["item_id"], rec["prompt_key"], rec["response_a_key"], rec["response_b_key"], p0, p1))
    return rows


def write_table_csv(table, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        for r in table:
            writer.writerow([r.item_id, r.prompt_key, r.response_a_key, r.response_b_key, f"{r.p_a_source_0:.10g}", f"{r.p_a_source_1:.10g}"])


def write_rows_jsonl(rows, path) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_rows_jsonl(path) -> list[TimedPreferenceRow]:
    with open(path) as fh:
        return [TimedPreferenceRow(**json.loads(line)) for line in fh if line.strip()]


def write_manifest(path, recipe: str, T: int, rows, seed: int, **params) -> dict:
    counts = {"train": sum(r.split == "train" for r in rows), "test": sum(r.split == "test" for r in rows)}
    manifest = {"recipe": recipe, "T": T, "seed": seed, **params, "row_counts": counts}
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
