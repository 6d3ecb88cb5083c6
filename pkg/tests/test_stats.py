import numpy as np
import pytest

from supermarket.stats import ks_two_sample, mean_ci, poisson_dispersion_test, wilson_interval


def test_ks_identical_samples():
    x = np.random.default_rng(0).normal(size=200)
    stat, p = ks_two_sample(x, x)
    assert stat == 0.0 and p == pytest.approx(1.0)


def test_ks_constant_samples():
    assert ks_two_sample(np.ones(60), np.ones(60)) == (0.0, 1.0)
    assert ks_two_sample(np.ones(60), np.zeros(60)) == (1.0, 0.0)


def test_ks_too_small():
    with pytest.raises(ValueError):
        ks_two_sample(np.zeros(49), np.zeros(100))


def test_ks_null_calibration():
    rng = np.random.default_rng(1)
    ps = np.array([ks_two_sample(rng.normal(size=300), rng.normal(size=300))[1]
                   for _ in range(400)])
    rate = (ps < 0.05).mean()
    assert rate < 0.1


def test_ks_power():
    rng = np.random.default_rng(2)
    assert ks_two_sample(rng.normal(size=1000), rng.normal(0.5, size=1000))[1] < 1e-6


def test_wilson():
    lo, hi = wilson_interval(10, 100, 0.95)
    assert lo == pytest.approx(0.0552, abs=1e-3) and hi == pytest.approx(0.1744, abs=1e-3)
    assert wilson_interval(0, 0) == (0.0, 1.0)
    lo, _ = wilson_interval(0, 50)
    assert lo == pytest.approx(0.0, abs=1e-12)


def test_mean_ci():
    m, lo, hi = mean_ci([1.0, 2.0, 3.0], z=2.0)
    assert m == 2.0 and hi - m == pytest.approx(2 * 1 / np.sqrt(3))


def test_poisson_dispersion():
    rng = np.random.default_rng(3)
    ok = poisson_dispersion_test(rng.poisson(4.0, 500), 4.0)
    assert ok["p_mean"] > 1e-3 and ok["p_dispersion"] > 1e-3
    over = poisson_dispersion_test(rng.negative_binomial(2, 1 / 3, 500), 4.0)
    assert over["p_dispersion"] < 1e-6
    assert poisson_dispersion_test(np.zeros(10), 0.0)["p_mean"] == 1.0
