import math

import mpmath
import numpy as np
import pytest
from conftest import random_dataset

from nsdpo._math import sigmoid_prime
from nsdpo.core import DriftSchedule, ConstantSegment, changepoint_schedule, default_schedule, sample_dataset, stationary_schedule
from nsdpo.theory import (
    TheoryConfig,
    alpha_coefficients,
    error_decomposition,
    estimation_bound_rhs,
    gamma_condition,
    gamma_from_budget,
    g_matrix,
    gt_psd_check,
    nonlinearity_coeffs,
    variation_budget,
)

mpmath.mp.dps = 40


def test_nonlinearity_examples():
    c = nonlinearity_coeffs(1.0, 0.0, 5.0)
    assert (c.k_sigma, c.c_sigma, c.R_sigma) == (0.25, 0.25, 1.0)
    c = nonlinearity_coeffs(1.0, 2.0, 1.0)
    s = 1 / (1 + mpmath.exp(-4))
    assert math.isclose(c.c_sigma, float(s * (1 - s)), rel_tol=1e-14)
    assert math.isclose(c.c_sigma, 0.017663, rel_tol=1e-4)
    for arg in np.linspace(0, 50, 26):
        assert nonlinearity_coeffs(arg, 1.0, 1.0).c_sigma <= 0.25
    # default synthetic setting: 2 tau L W = 128, far in the tail but not zero
    assert nonlinearity_coeffs(1.0, 32.0, 2.0).c_sigma > 0


def test_variation_budget_examples():
    assert variation_budget(stationary_schedule()) == 0.0
    chord = 4 * math.sin(math.pi / 132)  # per-step move of the rotation, all four pairs
    assert math.isclose(variation_budget(default_schedule()), 33 * chord, rel_tol=1e-13)
    assert math.pi - 0.01 < variation_budget(default_schedule()) < math.pi
    jump = changepoint_schedule(20, 7, [0.0, 0.0], [3.0, 4.0])
    assert math.isclose(variation_budget(jump), 5.0, rel_tol=1e-15)


def test_gamma_from_budget_examples():
    assert gamma_from_budget(1e-12, 8, 101) > 1 - 1e-6
    assert math.isclose(gamma_from_budget(8 * 101 / 4, 8, 101), 0.5, rel_tol=1e-15)
    for bad in (0.0, 8 * 101, 1e6):
        with pytest.raises(ValueError):
            gamma_from_budget(bad, 8, 101)


def test_gamma_condition_identity():
    for B, d, T in [(math.pi, 8, 101), (0.5, 4, 1000), (10.0, 2, 50)]:
        lhs, rhs = gamma_condition(B, d, T)
        assert lhs >= rhs
        g = gamma_from_budget(B, d, T)
        assert math.isclose(1 / (T * (1 - g)), rhs, rel_tol=1e-12)


def _cfg(**kw):
    base = dict(W=2.0, L=3.0, tau=0.5, lam=0.01, delta=0.1, d=4, T=50, n=1000, m_lower=20, m_upper=20, B_T=1.0, r_max=5.0)
    return TheoryConfig(**{**base, **kw})


def test_bound_terms_limits():
    assert estimation_bound_rhs(_cfg(B_T=0.0), 0.9).tracking_term == 0.0
    terms = [estimation_bound_rhs(_cfg(n=n, lam=4 / n), 0.9).learning_term for n in (10**3, 10**9, 10**15)]
    assert terms[0] > terms[1] > terms[2] and terms[2] < 1e-5 * terms[0]
    for n in (100, 1000, 12345):
        a = estimation_bound_rhs(_cfg(n=n, lam=4 / n), 0.9).learning_term
        b = estimation_bound_rhs(_cfg(n=2 * n, lam=4 / (2 * n)), 0.9).learning_term
        assert math.isclose(b / a, 1 / math.sqrt(2), rel_tol=1e-12)


def test_bound_regret_is_prefactor_times_estimation():
    b = estimation_bound_rhs(_cfg(kappa=3.0), 0.8)
    assert math.isclose(b.regret_bound, b.regret_prefactor * b.estimation_bound, rel_tol=1e-15)
    with pytest.raises(ValueError):
        estimation_bound_rhs(_cfg(), 1.0)


def test_theory_config_validation():
    for bad in ({"C2": 1.0}, {"delta": 0.0}, {"delta": 0.7}, {"W": 0.0}, {"lam": -1.0}, {"n": 0}):
        with pytest.raises(ValueError):
            _cfg(**bad)
    assert _cfg().replace(n=7).n == 7


def test_alpha_degenerate_segment(rng):
    phi = rng.normal(size=(20, 4))
    theta = rng.normal(size=4)
    alpha = alpha_coefficients(phi, theta, theta, 1.3)
    np.testing.assert_allclose(alpha, sigmoid_prime(1.3 * phi @ theta), rtol=1e-14)


def test_alpha_matches_mpmath_quadrature(rng):
    phi = rng.normal(size=(5, 4))
    a, b = rng.normal(size=4), rng.normal(size=4)
    alpha = alpha_coefficients(phi, a, b, 0.8)
    for i in range(5):
        za, zb = 0.8 * phi[i] @ a, 0.8 * phi[i] @ b

        def slope(v):
            s = 1 / (1 + mpmath.exp(-(zb + v * (za - zb))))
            return s * (1 - s)

        assert math.isclose(alpha[i], float(mpmath.quad(slope, [0, 1])), rel_tol=1e-12)


def test_gt_psd_random_instances(rng):
    for _ in range(30):
        ds = random_dataset(rng, n=40)
        W, L, tau = 1.0, ds.env.feature_bound, 0.5
        c_sigma = nonlinearity_coeffs(tau, L, W).c_sigma
        a, b = (v / max(1.0, np.linalg.norm(v)) for v in rng.normal(size=(2, 4)))
        check = gt_psd_check(a, b, ds, rng.uniform(0.3, 1), None, tau, rng.uniform(0, 1), c_sigma)
        assert check.passed, check.min_eig


def test_gt_psd_equal_parameters_and_regularised_floor(rng):
    ds = random_dataset(rng)
    theta = rng.normal(size=4) * 0.1
    assert gt_psd_check(theta, theta, ds, 0.9, None, 1.0, 0.0, nonlinearity_coeffs(1.0, ds.env.feature_bound, 1.0).c_sigma).passed
    lam, c_sigma = 0.5, 0.01
    G = g_matrix(ds.phi_diff, ds.t, ds.T, 0.9, theta, -theta, 1.0, lam, c_sigma)
    assert np.linalg.eigvalsh(G)[0] >= lam * c_sigma - 1e-10


def test_tracking_zero_for_stationary_schedule():
    s = stationary_schedule(T=101)
    ds = sample_dataset(s, 5, seed=0)
    dec = error_decomposition(ds, s, 0.9, 1.0, 0.0, 0.01)
    assert dec.xi_track == 0.0
    assert dec.xi_learn > 0


def test_noiseless_labels_remove_learning_error():
    s = default_schedule()
    ds = sample_dataset(s, 5, seed=0)
    dec = error_decomposition(ds, s, 0.9, 1.0, 0.0, 0.01, soft_labels=True)
    assert dec.xi_learn == 0.0
    assert dec.xi_track > 0


def test_learning_error_halves_when_data_quadruples():
    s = stationary_schedule(T=101)
    xi = {m: np.mean([error_decomposition(sample_dataset(s, m, seed=k), s, 0.9, 1.0, 0.0, 0.01).xi_learn for k in range(20)]) for m in (5, 20)}
    assert 2 * 0.7 <= xi[5] / xi[20] <= 2 * 1.3


def test_singular_covariance_raises(rng):
    ds = random_dataset(rng, n=2)
    s = DriftSchedule((ConstantSegment((1.0, 0.0, 0.0, 0.0), 1, ds.T),), ds.T)
    with pytest.raises(np.linalg.LinAlgError):
        error_decomposition(ds, s, 0.9, 1.0, 0.0, 0.1)
