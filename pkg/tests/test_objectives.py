import json
import math

import numpy as np
import pytest
from conftest import random_dataset
from hypothesis import given, settings
from hypothesis import strategies as st

from nsdpo.core import OfflineDataset, default_schedule, sample_dataset
from nsdpo.objectives import (
    EmptyWindowError,
    ObjectiveConfig,
    dpo_grad,
    dpo_loss,
    grad,
    hessian,
    implicit_reward_diff,
    loss,
    nsdpo_grad,
    nsdpo_loss,
    swdpo_loss,
)


def central_diff(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def test_implicit_reward_examples(rng):
    phi = rng.normal(size=(1, 6))
    theta = rng.normal(size=6)
    assert implicit_reward_diff(theta, theta, phi, 2.0)[0] == 0.0
    assert implicit_reward_diff(theta, None, -phi, 1.5)[0] == -implicit_reward_diff(theta, None, phi, 1.5)[0]
    ref = rng.normal(size=6)
    h = implicit_reward_diff(ref + phi[0] / (phi[0] @ phi[0]), ref, phi, 0.7)[0]
    assert math.isclose(h, 0.7, rel_tol=1e-12)


def test_loss_at_reference_is_weighted_log2(rng):
    ds = random_dataset(rng)
    cfg = ObjectiveConfig(gamma=0.8)
    w = 0.8 ** (ds.T - ds.t - 1)
    assert math.isclose(nsdpo_loss(np.zeros(4), ds, cfg).value, w.sum() * math.log(2) / len(ds), rel_tol=1e-14)
    assert math.isclose(dpo_loss(np.zeros(4), ds, cfg).value, math.log(2), rel_tol=1e-14)


def test_gamma_one_reduces_to_dpo_exactly(rng):
    for _ in range(20):
        ds = random_dataset(rng)
        theta = rng.normal(size=4)
        cfg = ObjectiveConfig(tau=rng.uniform(0.1, 3), gamma=1.0, lam=rng.uniform(0, 1))
        assert nsdpo_loss(theta, ds, cfg).value == dpo_loss(theta, ds, cfg).value
        np.testing.assert_array_equal(nsdpo_grad(theta, ds, cfg), dpo_grad(theta, ds, cfg))


def test_last_step_has_unit_weight(rng):
    ds = random_dataset(rng, n=1, T=9)
    ds = ds.subset(np.array([True]))
    ds = OfflineDataset(ds.x, ds.first, ds.second, [8], ds.label, 9, ds.env)
    assert nsdpo_loss(np.zeros(4), ds, ObjectiveConfig(gamma=0.3)).per_point_weights[0] == 1.0


def test_single_point_gradient_at_zero(rng):
    ds = random_dataset(rng, n=1, T=9)
    ds = OfflineDataset(ds.x, ds.first, ds.second, ds.t, [1.0], 9, ds.env)
    cfg = ObjectiveConfig(tau=1.7, gamma=0.6)
    expected = -(1.7 / 2) * 0.6 ** (9 - ds.t[0] - 1) * ds.phi_diff[0]
    np.testing.assert_allclose(nsdpo_grad(np.zeros(4), ds, cfg), expected, rtol=1e-14)


@pytest.mark.parametrize("objective", ["dpo", "nsdpo", "swdpo"])
def test_gradient_matches_finite_differences(objective, rng):
    for _ in range(20):
        ds = random_dataset(rng, soft=True)
        cfg = ObjectiveConfig(tau=rng.uniform(0.2, 2), gamma=rng.uniform(0.5, 1), lam=rng.uniform(0, 0.5), window_w=6)
        theta = rng.normal(size=4)
        ref = rng.normal(size=4)
        analytic = grad(objective, theta, ds, cfg, theta_ref=ref)
        numeric = central_diff(lambda th: loss(objective, th, ds, cfg, theta_ref=ref).value, theta)
        assert np.linalg.norm(analytic - numeric) <= 1e-6 * max(np.linalg.norm(numeric), 1e-3)


@pytest.mark.parametrize("objective", ["dpo", "nsdpo", "swdpo"])
def test_hessian_matches_finite_differences(objective, rng):
    ds = random_dataset(rng)
    cfg = ObjectiveConfig(tau=0.9, gamma=0.8, lam=0.1, window_w=5)
    theta = rng.normal(size=4)
    H = hessian(objective, theta, ds, cfg)
    numeric = np.column_stack([central_diff(lambda th: grad(objective, th, ds, cfg)[k], theta) for k in range(4)])
    np.testing.assert_allclose(H, numeric, rtol=1e-6, atol=1e-8)
    assert np.linalg.eigvalsh(H)[0] > 0


def test_gradient_vanishes_at_minimizer(rng):
    ds = random_dataset(rng, n=200)
    cfg = ObjectiveConfig(gamma=0.9, lam=0.05)
    theta = np.zeros(4)
    for _ in range(50):
        theta = theta - np.linalg.solve(hessian("nsdpo", theta, ds, cfg), grad("nsdpo", theta, ds, cfg))
    assert np.linalg.norm(grad("nsdpo", theta, ds, cfg)) < 1e-8


def test_window_reductions(rng):
    ds = random_dataset(rng, T=11)
    theta = rng.normal(size=4)
    for w in (10, 11, 50):
        cfg = ObjectiveConfig(window_w=w)
        assert swdpo_loss(theta, ds, cfg).value == dpo_loss(theta, ds, cfg).value
    only_last = ds.subset(ds.t == 10)
    cfg = ObjectiveConfig(window_w=1)
    assert math.isclose(swdpo_loss(theta, ds, cfg).value, dpo_loss(theta, only_last, cfg).value, rel_tol=1e-14)


def test_window_33_sees_only_post_drift_data():
    s = default_schedule()
    ds = sample_dataset(s, 2, seed=0)
    w = loss("swdpo", np.zeros(8), ds, ObjectiveConfig(window_w=33)).per_point_weights
    used = ds.t[w > 0]
    assert used.min() == 68
    assert all(np.array_equal(s.theta_at(t), s.theta_at(101)) for t in np.unique(used))


def test_empty_window_raises(rng):
    ds = random_dataset(rng, T=11)
    ds = ds.subset(ds.t < 5)
    with pytest.raises(EmptyWindowError):
        swdpo_loss(np.zeros(4), ds, ObjectiveConfig(window_w=2))


def test_swapping_pair_order_leaves_loss_unchanged(rng):
    ds = random_dataset(rng)
    theta = rng.normal(size=4)
    cfg = ObjectiveConfig(gamma=0.7)
    assert math.isclose(nsdpo_loss(theta, ds, cfg).value, nsdpo_loss(theta, ds.swapped(), cfg).value, rel_tol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.999), st.floats(0.05, 0.999))
def test_loss_monotone_in_gamma_at_reference(g1, g2):
    # heavier discounting only removes weight
    ds = random_dataset(np.random.default_rng(0))
    lo, hi = sorted((g1, g2))
    assert nsdpo_loss(np.zeros(4), ds, ObjectiveConfig(gamma=lo)).value <= nsdpo_loss(np.zeros(4), ds, ObjectiveConfig(gamma=hi)).value + 1e-15


def test_config_validation_and_serialization(rng):
    for bad in ({"gamma": 0.0}, {"gamma": 1.5}, {"tau": 0.0}, {"lam": -1.0}, {"window_w": 0}):
        with pytest.raises(ValueError):
            ObjectiveConfig(**bad)
    report = nsdpo_loss(np.zeros(4), random_dataset(rng, n=3), ObjectiveConfig(gamma=0.5))
    assert json.loads(json.dumps(report.to_dict()))["value"] == report.value


def test_large_logits_stay_finite(rng):
    ds = random_dataset(rng)
    theta = 1e4 * rng.normal(size=4)
    assert np.isfinite(dpo_loss(theta, ds, ObjectiveConfig()).value)
    assert np.all(np.isfinite(dpo_grad(theta, ds, ObjectiveConfig())))
