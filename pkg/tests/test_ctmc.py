import itertools
import math

import numpy as np
import pytest
from scipy import stats

from supermarket.ctmc import (
    QueueSystem, RngStream, TruncationOverflow, kernel_transition_rates, lengths_from_counts,
    path_statistics, queue_transition_rates, read_events, simulate_queues, simulate_tail,
    tail_counts,
)
from supermarket.fluid import fluid_solve
from supermarket.model import ModelParams, rounded_scales
from supermarket.stats import ks_two_sample


def enumerated_rates(lengths, lam, d, k_max):
    """Brute force over all N^d ordered choices; the shortest sampled queue
    receives the customer, so its length + 1 is the level that grows."""
    N = len(lengths)
    up = np.zeros(k_max)
    for choice in itertools.product(range(N), repeat=d):
        k = min(lengths[i] for i in choice) + 1
        if k <= k_max:
            up[k - 1] += N * lam / N**d
    down = np.array([sum(1 for L in lengths if L == k) for k in range(1, k_max + 1)], float)
    return up, down


@pytest.mark.parametrize("d", [2, 3])
def test_queue_rates_match_enumeration(d):
    rng = np.random.default_rng(d)
    for _ in range(5):
        lengths = rng.integers(0, 4, size=6)
        up, down = queue_transition_rates(lengths, 0.8, d, 5)
        up_e, down_e = enumerated_rates(lengths, 0.8, d, 5)
        np.testing.assert_allclose(up, up_e, rtol=1e-12, atol=1e-14)
        np.testing.assert_array_equal(down, down_e)


def test_kernel_rates_equal_queue_rates_exactly():
    rng = np.random.default_rng(0)
    for _ in range(100):
        N = int(rng.integers(5, 500))
        L = np.minimum(rng.geometric(rng.uniform(0.3, 0.9), size=N) - 1, 8)
        up_q, down_q = queue_transition_rates(L, 0.7, 2, 8)
        up_k, down_k = kernel_transition_rates(tail_counts(L, 8), N, 0.7, 2)
        np.testing.assert_array_equal(up_q, up_k)
        np.testing.assert_array_equal(down_q, down_k)


def test_lengths_roundtrip():
    c = np.array([7, 4, 4, 1, 0])
    L = lengths_from_counts(c, 10)
    np.testing.assert_array_equal(tail_counts(L, 5), c)


def test_reproducible_and_seed_sensitive(p7):
    c0 = rounded_scales(p7)
    a = simulate_tail(p7, c0, obs_times=[0.5, 1.0], rng=RngStream(3, 1))
    b = simulate_tail(p7, c0, obs_times=[0.5, 1.0], rng=RngStream(3, 1))
    c = simulate_tail(p7, c0, obs_times=[0.5, 1.0], rng=RngStream(3, 2))
    np.testing.assert_array_equal(a.counts, b.counts)
    assert not np.array_equal(a.counts, c.counts)


def test_counts_stay_monotone(p7):
    s = simulate_tail(p7, np.zeros(p7.k_max, np.int64), obs_times=np.linspace(0, 1, 21), rng=5)
    assert np.all(np.diff(s.counts, axis=1) <= 0)
    assert np.all(s.counts >= 0) and np.all(s.counts <= p7.n_servers)


def test_arrivals_without_service_d1():
    # d=1, no service: each queue is empty at t w.p. exp(-lam t)
    p = ModelParams(lam=0.6, d=2, n_servers=1000, t0=1.0, k_max=12)
    c0 = np.zeros(12, np.int64)
    n1 = np.array([simulate_tail(p, c0, rng=i, service=False, d=1).counts[-1, 0]
                   for i in range(300)])
    expect = 1000 * (1 - math.exp(-0.6))
    var = 1000 * math.exp(-0.6) * (1 - math.exp(-0.6))
    assert abs(n1.mean() - expect) < 4 * math.sqrt(var / 300)


def test_frozen_state_gives_exponential_gaps(p7):
    c0 = rounded_scales(p7)
    s = simulate_tail(p7, c0, rng=11, frozen=True, record_events=True, t_end=0.2)
    gaps = np.diff(s.events["t"])
    total = p7.n_servers * p7.lam + c0[0]
    ref = np.random.default_rng(0).exponential(1 / total, size=gaps.size)
    _, pv = ks_two_sample(gaps, ref)
    assert pv > 1e-3
    np.testing.assert_array_equal(s.counts[-1], c0)


def test_truncation_overflow():
    p = ModelParams(lam=0.95, d=2, n_servers=200, t0=20.0, k_max=3)
    with pytest.raises(TruncationOverflow):
        simulate_tail(p, np.zeros(3, np.int64), rng=0)
    with pytest.raises(TruncationOverflow):
        simulate_tail(p, np.array([5, 2, 1]), rng=0)


def test_input_validation(p7):
    with pytest.raises(ValueError):
        simulate_tail(p7, np.zeros(3, np.int64))
    with pytest.raises(ValueError):
        simulate_tail(p7, np.zeros(p7.k_max, np.int64), obs_times=[2.0])
    with pytest.raises(ValueError):
        simulate_tail(p7, np.array([1, 2] + [0] * (p7.k_max - 2)))


def test_event_log_replays_to_final_state(p7, tmp_path):
    c0 = rounded_scales(p7)
    s = simulate_tail(p7, c0, rng=2, record_events=True)
    inc = np.zeros(p7.k_max, np.int64)
    for typ, lvl in zip(s.events["type"], s.events["level"]):
        inc[lvl - 1] += 1 if typ == 0 else -1
    np.testing.assert_array_equal(c0 + inc, s.counts[-1])
    f = tmp_path / "events.bin"
    s.write_events(f)
    back = read_events(f)
    np.testing.assert_array_equal(back, s.events)
    assert f.stat().st_size == 11 * len(s.events)


def test_tail_and_queue_simulators_agree():
    p = ModelParams(lam=0.7, d=2, n_servers=300, t0=1.5, k_max=10)
    c0 = np.zeros(10, np.int64)
    L0 = np.zeros(300, np.int64)
    a = np.array([simulate_tail(p, c0, rng=RngStream(i, 0)).fractions[-1] for i in range(300)])
    b = np.array([simulate_queues(p, QueueSystem(L0), rng=RngStream(i, 1)).fractions[-1]
                  for i in range(300)])
    for k in (0, 1):
        assert ks_two_sample(a[:, k], b[:, k])[1] > 1e-3


def test_queue_simulator_conserves_customers():
    p = ModelParams(lam=0.7, d=3, n_servers=50, t0=1.0, k_max=12)
    s = simulate_queues(p, np.zeros(50, np.int64), obs_times=[0.5, 1.0], rng=4)
    final = s.meta["final_lengths"]
    np.testing.assert_array_equal(tail_counts(final, 12), s.counts[-1])


def test_mean_matches_fluid_at_large_n():
    p = ModelParams(lam=0.7, d=2, n_servers=20000, t0=1.0, threshold=5.0, k_max=8)
    c0 = np.zeros(8, np.int64)
    fl = fluid_solve(p, c0 / p.n_servers)
    X = np.array([simulate_tail(p, c0, rng=i).fractions[-1] for i in range(40)])
    x = fl.at(1.0)
    se = X.std(axis=0, ddof=1) / math.sqrt(40)
    assert np.all(np.abs(X.mean(axis=0) - x)[:3] < 5 * se[:3] + 1e-4)


def test_path_statistics(p7):
    c0 = rounded_scales(p7)
    fl = fluid_solve(p7, c0 / p7.n_servers)
    s = simulate_tail(p7, c0, rng=1, fluid=fl)
    rep = path_statistics(s, fl, p7.a, p7.m)
    assert rep.scaled_sup.shape == (p7.m - 1,)
    assert 0.1 < rep.max_scaled < 10
    # grid fallback agrees with the event-time supremum from below
    g = simulate_tail(p7, c0, rng=1, obs_times=fl.times)
    rep_g = path_statistics(g, fl, p7.a, p7.m)
    assert np.all(rep_g.sup_dev[: p7.m - 1] <= rep.sup_dev[: p7.m - 1] + 1e-12)
    bad = simulate_tail(p7, c0, rng=1, obs_times=[0.3333])
    with pytest.raises(ValueError):
        path_statistics(bad, fl, p7.a, p7.m)
