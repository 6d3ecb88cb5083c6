import json
import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import solve_ivp

from supermarket.couplings import (
    StoppingTimes, detect_stopping_times, gamma_tilde_from_marks, gamma_tilde_moments,
    mminf_poisson_mean, moment_bound, simulate_cutoff_coupling, simulate_jump_coupling,
    strip_height,
)
from supermarket.ctmc import RngStream, simulate_tail
from supermarket.fluid import fluid_solve
from supermarket.model import ModelParams, drift, drift_jacobian, rounded_scales
from supermarket.stats import ks_two_sample


@pytest.fixture(scope="module")
def small():
    p = ModelParams(lam=0.7, d=2, n_servers=2000, t0=1.0, threshold=5.0)
    c0 = rounded_scales(p)
    return p, c0, fluid_solve(p, c0 / p.n_servers)


def test_jump_coupling_x_marginal_matches_chain(small):
    p, c0, fl = small
    a = np.array([simulate_jump_coupling(p, fl, c0, rng=RngStream(i, 0)).counts[-1]
                  for i in range(200)])
    b = np.array([simulate_tail(p, c0, rng=RngStream(i, 1)).counts[-1] for i in range(200)])
    for k in (0, 1):
        assert ks_two_sample(a[:, k], b[:, k])[1] > 1e-3


def test_force_joint_has_no_solo_atoms(small):
    p, c0, fl = small
    path = simulate_jump_coupling(p, fl, c0, rng=3, force_joint=True)
    assert path.kinds[1] == 0 and path.kinds[2] == 0
    assert path.kinds[0] > 0


def test_compensator_only_path_solves_linear_ode():
    p = ModelParams(lam=0.7, d=2, n_servers=900, t0=1.0, k_max=8, threshold=5.0)
    c0 = np.zeros(8, np.int64)
    fl = fluid_solve(p, c0 / p.n_servers)
    path = simulate_jump_coupling(p, fl, c0, rng=0, jumps=False, obs_times=[0.5, 1.0])

    def rhs(t, g):
        x = fl.at(t)
        return drift_jacobian(x, p.lam, p.d) @ g - math.sqrt(p.n_servers) * drift(x, p.lam, p.d)

    ref = solve_ivp(rhs, (0, 1), np.zeros(8), rtol=1e-11, atol=1e-12, t_eval=[0.5, 1.0])
    np.testing.assert_allclose(path.gamma, ref.y.T, atol=1e-6)


def test_gamma_tilde_matches_propagator_form():
    p = ModelParams(lam=0.7, d=2, n_servers=300, t0=0.5, k_max=8, threshold=5.0)
    c0 = rounded_scales(p)
    fl = fluid_solve(p, c0 / p.n_servers)
    path = simulate_jump_coupling(p, fl, c0, rng=9, record_marks=True)
    assert len(path.mark_log) == path.marks.sum()
    g = gamma_tilde_from_marks(fl, path.mark_log, 0.5, p.n_servers, nodes=128)
    np.testing.assert_allclose(path.gamma[-1], g, atol=1e-6)


def test_gamma_tilde_moments(small):
    p, c0, fl = small
    paths = [simulate_jump_coupling(p, fl, c0, rng=RngStream(i, 2)) for i in range(100)]
    chk = gamma_tilde_moments(paths, p, r=3.0)
    assert chk.ok
    assert 0.0 <= chk.t5_frequency <= 1.0
    np.testing.assert_array_equal(chk.bound, moment_bound(p))
    with pytest.raises(ValueError):
        gamma_tilde_moments(paths[:99], p)


def test_mark_counts_are_poisson_with_fluid_intensity(small):
    p, c0, fl = small
    marks = np.array([simulate_jump_coupling(p, fl, c0, rng=RngStream(i, 4)).marks[0, 0]
                      for i in range(150)])
    ts = np.linspace(0, 1, 513)
    lam_up = p.n_servers * p.lam * (1 - fl.at(ts)[:, 0] ** 2)
    mean = float(np.trapezoid(lam_up, ts))
    se = math.sqrt(mean / 150)
    assert abs(marks.mean() - mean) < 4 * se


@pytest.fixture(scope="module")
def cut():
    p = ModelParams(lam=0.5, d=2, n_servers=10**4, t0=1.0, threshold=5.0)
    c0 = rounded_scales(p, truncate_at=p.m - 1)
    return p, c0, fluid_solve(p, c0 / p.n_servers)


def test_cutoff_coupling_x_marginal(cut):
    p, c0, fl = cut
    a = np.array([simulate_cutoff_coupling(p, fl, c0, rng=RngStream(i, 0)).counts[-1]
                  for i in range(200)])
    b = np.array([simulate_tail(p, c0, rng=RngStream(i, 1)).counts[-1] for i in range(200)])
    for k in range(p.m):
        assert ks_two_sample(a[:, k], b[:, k])[1] > 1e-3


def test_mminf_count_has_poisson_mean(cut):
    p, c0, fl = cut
    hats = np.array([simulate_cutoff_coupling(p, fl, c0, rng=RngStream(i, 2)).hat_counts[-1]
                     for i in range(300)])
    mu = mminf_poisson_mean(fl, p.m, p.n_servers, 1.0)
    assert abs(hats.mean() - mu) < 4 * math.sqrt(mu / 300)


def test_no_atoms_leaves_binomial_decay():
    p = ModelParams(lam=0.5, d=2, n_servers=10**4, t0=1.0, threshold=5.0)
    c0 = rounded_scales(p, truncate_at=p.m - 1)
    n0 = 20
    c0[p.m - 1] = n0
    fl = fluid_solve(p, c0 / p.n_servers, check=False)
    top = np.array([simulate_cutoff_coupling(p, fl, c0, rng=i, atoms=False).counts[-1, p.m - 1]
                    for i in range(300)])
    q = math.exp(-1.0)
    assert abs(top.mean() - n0 * q) < 4 * math.sqrt(n0 * q * (1 - q) / 300)


def test_strip_regeneration(cut):
    p, c0, fl = cut
    h = strip_height(p, p.m) / 16
    regen = 0
    for i in range(40):
        path = simulate_cutoff_coupling(p, fl, c0, rng=i, height=h)
        assert path.height == h * 2**path.regenerations
        regen += path.regenerations
    assert regen > 0


def test_mminf_mean_at_stationarity():
    p = ModelParams(lam=0.5, d=2, n_servers=10**4, t0=1.0, threshold=5.0)
    fl = fluid_solve(p, p.a)
    m = p.m
    # x^{m-1} = a_{m-1} stationary, lam a_{m-1}^d = a_m
    expect = p.n_servers * p.a[m - 1] * (1 - math.exp(-1.0))
    assert mminf_poisson_mean(fl, m, p.n_servers, 1.0) == pytest.approx(expect, rel=1e-9)


def test_stopping_times_container():
    st = StoppingTimes(times={"T1": None, "T2": 0.4, "T4": 0.2}, t0=1.0, seed=5)
    assert st.T == 0.2 and st.first == "T4"
    body = json.loads(st.to_json())
    assert body["T4"] == 0.2 and body["T8"] is None and body["seed"] == 5
    idle = StoppingTimes(times={"T1": None}, t0=1.0)
    assert idle.T == 1.0 and idle.first is None


def test_replayed_t4_dominates_grid_crossings(p7):
    c0 = rounded_scales(p7)
    fl = fluid_solve(p7, c0 / p7.n_servers)
    grid = np.linspace(0, 1, 201)
    R = 0.8
    thr = R * np.sqrt(p7.a[: p7.m - 1] / p7.n_servers)
    seen = 0
    for i in range(30):
        s = simulate_tail(p7, c0, obs_times=grid, rng=i, record_events=True)
        st = detect_stopping_times(1.0, p7.a, p7.m, p7.n_servers, fluid=fl, sample=s, R=R)
        over = np.abs(s.fractions[:, : p7.m - 1] - fl.at(grid)[:, : p7.m - 1]) > thr
        rows = np.flatnonzero(over.any(axis=1))
        if rows.size:
            seen += 1
            assert st.times["T4"] is not None and st.times["T4"] <= grid[rows[0]]
    assert seen > 0


def test_stopping_times_from_coupled_paths(cut):
    p, c0, fl = cut
    for i in range(20):
        cp = simulate_cutoff_coupling(p, fl, c0, rng=i, r=0.0)
        st = detect_stopping_times(1.0, p.a, p.m, p.n_servers, cutoff=cp)
        # r = 0: the first M/M/inf arrival trips T3
        assert (st.times["T3"] is not None) == (cp.accepted[1] > 0)
    with pytest.raises(ValueError):
        detect_stopping_times(1.0, p.a, p.m, p.n_servers,
                              sample=simulate_tail(p, c0, rng=0, record_events=True), R=1.0)
