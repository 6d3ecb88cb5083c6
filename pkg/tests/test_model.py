import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supermarket.model import (
    ModelParams, TruncationError, cutoff_level, derived_constants, drift, drift_gradient,
    drift_jacobian, in_s0, log_scales, default_threshold, rate_minus, rate_plus, rates,
    rounded_scales, scale_sequence, scaled_norm,
)
from conftest import iterated_scales


@pytest.mark.parametrize("lam", [0.3, 0.5, 0.7, 0.9])
@pytest.mark.parametrize("d", [2, 3])
def test_scales_match_recursion(lam, d):
    p = ModelParams(lam=lam, d=d, n_servers=100, k_max=5)
    np.testing.assert_allclose(p.a, iterated_scales(lam, d, 5), rtol=1e-13)


@pytest.mark.parametrize("lam", [0.3, 0.5, 0.7, 0.9])
@pytest.mark.parametrize("d", [2, 3])
def test_fixed_point_residual(lam, d):
    p = ModelParams(lam=lam, d=d, n_servers=100, k_max=12)
    assert scaled_norm(drift(p.a, lam, d), p.a) < 1e-12


def test_underflow_is_flagged_and_excluded():
    p = ModelParams(lam=0.5, d=3, n_servers=100, k_max=12)
    with pytest.warns(RuntimeWarning, match="underflows"):
        sv = scale_sequence(p)
    assert sv.underflow[-1] and sv.a[-1] == 0.0
    assert not sv.underflow[0]
    x = np.zeros(12)
    x[-1] = 1.0
    assert scaled_norm(x, sv.a) == 0.0


def test_log_scales_closed_form():
    la = log_scales(0.9, 2, 4)
    np.testing.assert_allclose(la, np.array([1, 3, 7, 15]) * math.log(0.9))


def test_cutoff_level_large_n():
    # N a_5 = 1e6 * 0.9^31 > A and N a_6 = 1e6 * 0.9^63 < A with A = (log N)^4
    p = ModelParams(lam=0.9, d=2, n_servers=10**6, k_max=10)
    A = default_threshold(10**6)
    assert A == pytest.approx(math.log(1e6) ** 4)
    assert cutoff_level(10**6, p.a, A) == 6
    assert p.m == 6
    assert 10**6 * p.a[5] <= A < 10**6 * p.a[4]


def test_cutoff_level_small_n_is_one():
    p = ModelParams(lam=0.5, d=2, n_servers=100, k_max=5)
    assert p.m == 1


def test_cutoff_needs_deep_enough_truncation():
    a = ModelParams(lam=0.9, d=2, n_servers=10**6, k_max=3).a
    with pytest.raises(TruncationError):
        cutoff_level(10**6, a, default_threshold(10**6))


def test_default_k_max_is_m_plus_3():
    p = ModelParams(lam=0.5, d=2, n_servers=10**5, threshold=5.0)
    assert p.m == 4 and p.k_max == 7


@pytest.mark.parametrize("kw", [
    dict(lam=1.0), dict(lam=0.0), dict(d=1), dict(n_servers=0), dict(t0=0.0), dict(rho=0.5),
    dict(k_max=2), dict(threshold=0.5),
])
def test_params_validation(kw):
    base = dict(lam=0.5, d=2, n_servers=10)
    base.update(kw)
    with pytest.raises(ValueError):
        ModelParams(**base)


def test_derived_constants():
    p = ModelParams(lam=0.5, d=2, n_servers=10**4, rho=1.0, k_max=8)
    c = derived_constants(p)
    assert (c.sigma, c.L, c.H) == (2.0, 10.0, 1.0)
    expect = (math.log(math.log(1e4)) - math.log(math.log(2.0))) / math.log(2)
    assert c.alpha == pytest.approx(expect)


def test_rates_telescope_to_lambda():
    x = np.array([0.6, 0.3, 0.1, 0.0])
    plus, minus = rates(x, 0.8, 2)
    assert plus.sum() == pytest.approx(0.8)
    assert minus.sum() == pytest.approx(0.6)
    assert rate_plus(x, 1, 0.8, 2) == pytest.approx(0.8 * (1 - 0.36))
    assert rate_minus(x, 2, 0.8, 2) == pytest.approx(0.2)
    with pytest.raises(IndexError):
        rate_plus(x, 5, 0.8, 2)


def test_rates_broadcast_over_rows():
    X = np.array([[0.6, 0.3, 0.1], [0.5, 0.2, 0.0]])
    plus, minus = rates(X, 0.7, 3)
    for row, pr, mr in zip(X, plus, minus):
        p1, m1 = rates(row, 0.7, 3)
        np.testing.assert_array_equal(pr, p1)
        np.testing.assert_array_equal(mr, m1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=10),
       st.floats(0.05, 0.95), st.integers(2, 5))
def test_rates_nonnegative_anywhere(x, lam, d):
    plus, minus = rates(np.array(x), lam, d)
    assert np.all(plus >= 0) and np.all(minus >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.1, 0.9), min_size=3, max_size=8), st.integers(2, 4))
def test_jacobian_matches_central_differences(factors, d):
    # strictly decreasing interior point: the positive parts are inactive
    x = np.cumprod(factors)
    lam, h = 0.6, 1e-7
    J = drift_jacobian(x, lam, d)
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        fd = (drift(x + e, lam, d) - drift(x - e, lam, d)) / (2 * h)
        np.testing.assert_allclose(J[:, j], fd, atol=1e-6)


def test_gradient_is_jacobian_product():
    rng = np.random.default_rng(1)
    x = np.array([0.7, 0.4, 0.1, 0.01])
    y = rng.normal(size=4)
    np.testing.assert_allclose(drift_gradient(x, y, 0.7, 3), drift_jacobian(x, 0.7, 3) @ y,
                               rtol=1e-14, atol=1e-15)


def test_gradient_second_order_fd():
    x = np.array([0.7, 0.4, 0.1, 0.01])
    y = np.array([0.05, -0.02, 0.01, 0.001])
    exact = drift_gradient(x, y, 0.7, 3)
    errs = []
    hs = [2.0**-j for j in range(3, 8)]
    for h in hs:
        fd = (drift(x + h * y, 0.7, 3) - drift(x - h * y, 0.7, 3)) / (2 * h)
        errs.append(np.max(np.abs(fd - exact)))
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 1.9 < order < 2.1


def test_in_s0():
    assert in_s0([1.0, 0.5, 0.5, 0.0])
    assert not in_s0([0.5, 0.6])
    assert not in_s0([1.2, 0.1])
    assert not in_s0([0.5, -0.1])


def test_rounded_scales():
    p = ModelParams(lam=0.7, d=2, n_servers=10**5, threshold=5.0, k_max=8)
    c = rounded_scales(p)
    assert np.all(c <= p.n_servers * p.a + 1e-9)
    assert np.all(np.diff(c) <= 0)
    assert list(c[:5]) == [70000, 34299, 8235, 474, 1]
    t = rounded_scales(p, truncate_at=3)
    assert list(t[:4]) == [70000, 34299, 8235, 0]
