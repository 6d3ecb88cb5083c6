import math

import numpy as np
import pytest
from scipy.linalg import solve_continuous_lyapunov

from supermarket.diffusion import (
    check_gt_bound, compare_fluctuations, covariance_by_propagator, covariance_solve, gap,
    simulate_gamma,
)
from supermarket.fluid import fluid_solve
from supermarket.model import ModelParams, drift_jacobian, rates


@pytest.fixture(scope="module")
def setup():
    p = ModelParams(lam=0.7, d=2, n_servers=10**4, t0=1.0, k_max=8)
    fl = fluid_solve(p, p.a)
    return p, fl, covariance_solve(fl, p)


def test_lyapunov_matches_propagator_quadrature(setup):
    p, fl, cov = setup
    V = covariance_by_propagator(fl, 1.0)
    assert np.linalg.norm(V - cov.V[-1]) < 1e-6
    assert cov.min_eig > -1e-10
    np.testing.assert_allclose(cov.V[-1], cov.V[-1].T, atol=0)


def test_long_time_limit_solves_algebraic_lyapunov():
    p = ModelParams(lam=0.7, d=2, n_servers=10**4, t0=40.0, k_max=8)
    fl = fluid_solve(p, p.a)
    cov = covariance_solve(fl, p)
    J = drift_jacobian(p.a, p.lam, p.d)
    plus, minus = rates(p.a, p.lam, p.d)
    ref = solve_continuous_lyapunov(J, -np.diag(plus + minus))
    np.testing.assert_allclose(cov.V[-1], ref, atol=1e-9)


def test_euler_maruyama_variance_matches_ode(setup):
    p, fl, cov = setup
    g = simulate_gamma(fl, p, rng=1, n_replicas=4000, obs_times=[1.0]).gamma[0]
    v = g[:, 0].var(ddof=1)
    v_ode = cov.V[-1, 0, 0]
    se = v_ode * math.sqrt(2 / 4000)
    assert abs(v - v_ode) < 4 * se + 5e-3 * v_ode
    assert abs(g[:, 0].mean()) < 4 * math.sqrt(v_ode / 4000)


def test_noise_linearity(setup):
    p, fl, _ = setup
    g0 = simulate_gamma(fl, p, rng=2, n_replicas=3, noise_scale=0.0)
    assert not g0.gamma.any() and not g0.sup_abs.any()
    g1 = simulate_gamma(fl, p, rng=2, n_replicas=3, dt=1 / 256)
    g2 = simulate_gamma(fl, p, rng=2, n_replicas=3, dt=1 / 256, noise_scale=2.0)
    np.testing.assert_allclose(g2.gamma, 2 * g1.gamma, rtol=1e-12, atol=1e-15)


def test_gap():
    np.testing.assert_allclose(gap([0.6, 0.5, 0.1]), [0.1, 0.1, 0.1])
    np.testing.assert_allclose(gap([0.7, 0.2, 0.0]), [0.3, 0.2, 0.0])


def test_gt_bound_finite(setup):
    p, fl, cov = setup
    rep = check_gt_bound(cov, fl, p)
    assert np.isfinite(rep.c0_hat) and rep.c0_hat > 0
    assert rep.moment_ok and rep.moment_ratio < 1


def test_compare_fluctuations_requires_replicas(setup):
    p, fl, cov = setup
    X = np.zeros((100, 1, p.k_max))
    with pytest.raises(ValueError):
        compare_fluctuations(X, X, fl, p.n_servers, [1.0], [1])


def test_compare_fluctuations_gaussian_vs_itself(setup):
    p, fl, cov = setup
    g = simulate_gamma(fl, p, rng=5, n_replicas=1000, obs_times=[1.0]).gamma
    h = simulate_gamma(fl, p, rng=6, n_replicas=1000, obs_times=[1.0]).gamma
    chain = fl.at([1.0])[None] + g.transpose(1, 0, 2) / math.sqrt(p.n_servers)
    rows = compare_fluctuations(chain, h.transpose(1, 0, 2), fl, p.n_servers, [1.0], [1, 2], cov)
    assert [r.level for r in rows] == [1, 2]
    for r in rows:
        assert r.ks_p > 1e-3
        assert 0.85 < r.var_ratio < 1.15
