"""PNG figures rendered next to the CSV output.  matplotlib is imported lazily."""

from __future__ import annotations

import numpy as np

__all__ = ["plot_trace", "plot_sweep", "plot_bound_study"]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _pyplot().close(fig)


def plot_trace(trace, path, title: str | None = None) -> None:
    """Loss and test reward accuracy against the training step."""
    plt = _pyplot()
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(trace.step, trace.loss)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("training loss")
    acc = np.asarray(trace.reward_accuracy, dtype=float)
    if np.isfinite(acc).any():
        ax_acc.plot(trace.step, acc)
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("reward accuracy")
    ax_acc.set_ylim(0, 1)
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_sweep(aggregate_rows, path) -> None:
    """Seed-mean accuracy per method with a one-std band."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = list(dict.fromkeys(r["method"] for r in aggregate_rows))
    for method in methods:
        rows = [r for r in aggregate_rows if r["method"] == method]
        step = np.array([r["step"] for r in rows])
        mean = np.array([r["mean_accuracy"] for r in rows])
        std = np.array([r["std_accuracy"] for r in rows])
        (line,) = ax.plot(step, mean, label=method)
        ax.fill_between(step, mean - std, mean + std, color=line.get_color(), alpha=0.15)
    ax.set_xlabel("step")
    ax.set_ylabel("reward accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize="small")
    _save(fig, path)


def plot_bound_study(rows, path) -> None:
    """Log-log view of the learning term, empirical error and bound against n."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ns = sorted({r["n"] for r in rows})
    for key in ("xi_learn", "xi_track", "empirical_error", "bound_rhs"):
        means = [np.nanmean([r[key] for r in rows if r["n"] == n]) for n in ns]
        if all(np.isfinite(m) and m > 0 for m in means):
            ax.plot(ns, means, marker="o", label=key)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.legend(fontsize="small")
    _save(fig, path)
