"""Overflow-safe logistic helpers."""

import numpy as np

_SOFTPLUS_CUTOFF = 30.0


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def softplus(z):
    """``log(1 + exp(z))``; linear above the cutoff, ``exp(z)`` below its negative."""
    z = np.asarray(z, dtype=float)
    out = np.where(z > _SOFTPLUS_CUTOFF, z, 0.0)
    mid = np.abs(z) <= _SOFTPLUS_CUTOFF
    out = np.where(mid, np.log1p(np.exp(np.clip(z, -_SOFTPLUS_CUTOFF, _SOFTPLUS_CUTOFF))), out)
    low = z < -_SOFTPLUS_CUTOFF
    out = np.where(low, np.exp(np.minimum(z, 0.0)), out)
    return out if out.ndim else float(out)


def log_sigmoid(z):
    return -softplus(-np.asarray(z, dtype=float))


def sigmoid_prime(z):
    # exp(-|z|) form keeps precision in the tails where 1 - sigmoid(z) rounds to 0
    e = np.exp(-np.abs(np.asarray(z, dtype=float)))
    out = e / (1.0 + e) ** 2
    return out if out.ndim else float(out)
