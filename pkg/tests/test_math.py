import mpmath

mpmath.mp.dps = 50
import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from nsdpo._math import log_sigmoid, sigmoid, sigmoid_prime, softplus

reals = st.floats(-700, 700, allow_nan=False)


def _mp_sigmoid(z):
    return 1 / (1 + mpmath.exp(-mpmath.mpf(z)))


@given(reals)
def test_sigmoid_matches_mpmath(z):
    assert np.isclose(sigmoid(z), float(_mp_sigmoid(z)), rtol=1e-14, atol=0)


@given(reals)
def test_sigmoid_prime_matches_mpmath_in_tails(z):
    with mpmath.workdps(400):
        s = _mp_sigmoid(z)
        exact = s * (1 - s)
    assert np.isclose(sigmoid_prime(z), float(exact), rtol=1e-12, atol=0)


@given(reals)
def test_softplus_and_log_sigmoid(z):
    exact = float(mpmath.log1p(mpmath.exp(mpmath.mpf(z))))
    assert np.isclose(softplus(z), exact, rtol=1e-12, atol=0)
    assert np.isclose(log_sigmoid(z), -float(mpmath.log1p(mpmath.exp(-mpmath.mpf(z)))), rtol=1e-12, atol=0)


def test_symmetry_and_shapes():
    z = np.linspace(-50, 50, 101)
    np.testing.assert_allclose(sigmoid(-z), 1 - sigmoid(z), atol=1e-16)
    assert sigmoid(np.zeros((2, 3))).shape == (2, 3)
    assert isinstance(sigmoid(0.0), float)
    assert sigmoid_prime(0.0) == 0.25
    assert sigmoid_prime(128.0) > 0
