"""Exact simulation of the supermarket chain.

Two simulators realise the same chain: ``simulate_tail`` works on the tail
counts ``n_k = N X^k`` with the kernel rates, ``simulate_queues`` tracks every
queue and samples the ``d`` choices explicitly.  Each is the other's oracle.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .fluid import FluidPath
from .model import ModelParams, check_counts

EVENT_DTYPE = np.dtype([("t", "<f8"), ("type", "u1"), ("level", "<u2")])
ARRIVAL, DEPARTURE = 0, 1


class TruncationOverflow(RuntimeError):
    """The chain tried to occupy level ``k_max``."""


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, stream)``."""

    seed: int
    stream: int = 0

    @property
    def kernel_seed(self) -> int:
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), self.stream])
        return int(ss.generate_state(1, np.uint32)[0])

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed & (2**64 - 1), self.stream]))


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))


@dataclass
class SamplePath:
    """Tail counts observed on a grid, plus per-level summaries.

    ``sup_dev[k-1]`` is the supremum over event and grid times of
    ``|X^k_t - x^k_t|`` when a fluid path was supplied (NaN otherwise);
    ``first_hit`` records when that deviation first exceeded the supplied
    threshold and ``first_positive`` when each level was first occupied.
    """

    n_servers: int
    obs_times: np.ndarray
    counts: np.ndarray
    sup_dev: np.ndarray
    first_hit: np.ndarray
    first_positive: np.ndarray
    n_events: int
    events: np.ndarray | None = None
    seed: RngStream | None = None
    meta: dict = field(default_factory=dict)

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.n_servers

    def to_csv(self, path) -> None:
        K = self.counts.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"n{k}" for k in range(1, K + 1)])
            for t, row in zip(self.obs_times, self.counts):
                w.writerow([repr(float(t))] + [int(v) for v in row])

    def write_events(self, path) -> None:
        """Binary event log: little-endian f64 time, u8 type, u16 level."""
        if self.events is None:
            raise ValueError("path was simulated without an event log")
        with open(path, "wb") as fh:
            fh.write(self.events.astype(EVENT_DTYPE).tobytes())


def read_events(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return np.frombuffer(fh.read(), dtype=EVENT_DTYPE)


def _fluid_arrays(fluid: FluidPath | None, k_max: int, t_end: float):
    if fluid is None:
        return 1.0, np.zeros((0, k_max)), np.zeros((0, k_max))
    if fluid.k_max != k_max:
        raise ValueError("fluid path and state have different k_max")
    if fluid.t_end < t_end - 1e-12:
        raise ValueError("fluid path does not cover the horizon")
    return fluid.dt, np.ascontiguousarray(fluid.states), np.ascontiguousarray(fluid.drifts)


def _obs_grid(obs_times, t_end):
    obs = np.asarray(obs_times if obs_times is not None else [t_end], dtype=float)
    if obs.ndim != 1 or np.any(np.diff(obs) < 0) or np.any(obs < 0) or np.any(obs > t_end):
        raise ValueError("observation times must be sorted within [0, t_end]")
    return obs


def _event_capacity(n, lam, t_end):
    mean = n * (1.0 + lam) * t_end
    return int(1.5 * mean + 10 * math.sqrt(mean) + 1000)


def simulate_tail(
    params: ModelParams,
    counts0,
    obs_times=None,
    rng=0,
    fluid: FluidPath | None = None,
    thresholds=None,
    t_end: float | None = None,
    record_events: bool = False,
    service: bool = True,
    frozen: bool = False,
    d: int | None = None,
) -> SamplePath:
    """Gillespie simulation of the tail counts.

    ``thresholds`` (fractions, one per level) set the deviation levels whose
    first crossing against ``fluid`` is recorded.  ``service=False``,
    ``frozen=True`` and an explicit ``d`` exist for validation runs only.

    Raises TruncationOverflow if level ``k_max`` would become occupied.
    """
    N = params.n_servers
    counts0 = check_counts(counts0, N)
    if counts0.shape != (params.k_max,):
        raise ValueError(f"counts must have length k_max={params.k_max}")
    if counts0[-1] != 0:
        raise TruncationOverflow("initial state occupies level k_max")
    t_end = params.t0 if t_end is None else float(t_end)
    obs = _obs_grid(obs_times, t_end)
    fdt, fs, fd = _fluid_arrays(fluid, params.k_max, t_end)
    thr = np.full(params.k_max, np.inf) if thresholds is None else np.asarray(thresholds, float)
    stream = as_stream(rng)
    cap = _event_capacity(N, params.lam, t_end) if record_events else 0
    while True:
        ev_t = np.empty(cap)
        ev_type = np.empty(cap, np.uint8)
        ev_lvl = np.empty(cap, np.uint16)
        out = _kernels.tail_kernel(
            counts0, float(N), params.lam, int(d if d is not None else params.d),
            bool(service), bool(frozen), t_end, obs, stream.kernel_seed,
            fdt, fs, fd, thr, ev_t, ev_type, ev_lvl, bool(record_events),
        )
        obs_counts, sup, first_hit, first_pos, nev, status, t_stop = out
        if status == _kernels.LOG_FULL:
            cap *= 2
            continue
        break
    if status == _kernels.OVERFLOW:
        raise TruncationOverflow(
            f"level k_max={params.k_max} would become occupied at t={t_stop:.6g}"
        )
    events = None
    if record_events:
        events = np.empty(nev, EVENT_DTYPE)
        events["t"], events["type"], events["level"] = ev_t[:nev], ev_type[:nev], ev_lvl[:nev]
    if fluid is None:
        sup = np.full(params.k_max, np.nan)
    return SamplePath(
        n_servers=N,
        obs_times=obs,
        counts=obs_counts,
        sup_dev=sup,
        first_hit=first_hit,
        first_positive=first_pos,
        n_events=int(nev),
        events=events,
        seed=stream,
        meta={"counts0": counts0.tolist()},
    )


@dataclass
class QueueSystem:
    queue_lengths: np.ndarray
    clock: float = 0.0

    def tail_counts(self, k_max: int) -> np.ndarray:
        return tail_counts(self.queue_lengths, k_max)


def tail_counts(lengths, k_max: int) -> np.ndarray:
    lengths = np.asarray(lengths)
    return np.array([(lengths >= k).sum() for k in range(1, k_max + 1)], dtype=np.int64)


def lengths_from_counts(counts, n_servers: int) -> np.ndarray:
    """Queue lengths realising the tail counts, longest queues first."""
    counts = np.asarray(counts, dtype=np.int64)
    lengths = np.zeros(n_servers, dtype=np.int64)
    for k, c in enumerate(counts, start=1):
        lengths[:c] = k
    return lengths


def simulate_queues(
    params: ModelParams,
    system,
    obs_times=None,
    rng=0,
    t_end: float | None = None,
) -> SamplePath:
    """Event-driven simulation at queue granularity.

    Arrivals are Poisson(N lam); each samples ``d`` queues uniformly with
    replacement and joins a shortest one (ties uniform over the sampled
    positions).  Services use one rate-1 clock per busy queue.
    """
    lengths = system.queue_lengths if isinstance(system, QueueSystem) else system
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (params.n_servers,) or np.any(lengths < 0):
        raise ValueError("need N nonnegative queue lengths")
    t_end = params.t0 if t_end is None else float(t_end)
    obs = _obs_grid(obs_times, t_end)
    stream = as_stream(rng)
    obs_counts, final, nev, status = _kernels.queue_kernel(
        lengths, params.lam, params.d, t_end, obs, stream.kernel_seed, params.k_max
    )
    if status == _kernels.OVERFLOW:
        raise TruncationOverflow(f"a queue exceeded k_max={params.k_max}")
    K = params.k_max
    return SamplePath(
        n_servers=params.n_servers,
        obs_times=obs,
        counts=obs_counts,
        sup_dev=np.full(K, np.nan),
        first_hit=np.full(K, np.inf),
        first_positive=np.full(K, np.inf),
        n_events=int(nev),
        seed=stream,
        meta={"final_lengths": final},
    )


def kernel_transition_rates(counts, n_servers: int, lam: float, d: int):
    """Up/down rates ``N lam_+^k``, ``N lam_-^k`` of the tail chain."""
    counts = np.asarray(counts, dtype=np.int64)
    y = np.concatenate(([1.0], counts / n_servers, [0.0]))
    up = n_servers * lam * (y[:-2] ** d - y[1:-1] ** d)
    down = (counts - np.append(counts[1:], 0)).astype(float)
    return up, down


def queue_transition_rates(lengths, lam: float, d: int, k_max: int):
    """Tail-level rates implied by the queue-level dynamics.

    The arrival rate into level ``k`` is ``N lam P(min of d picks = k - 1)``,
    with ``P(min >= j) = F_j^d`` for ``F_j`` the fraction of queues of length
    at least ``j`` (d independent uniform picks).  Departures leave level
    ``k`` at rate ``#{queues of length exactly k}``.
    """
    lengths = np.asarray(lengths)
    N = len(lengths)
    j = np.arange(0, k_max + 1)
    F = np.array([(lengths >= jj).mean() for jj in j])
    p_min = F[:-1] ** d - F[1:] ** d
    up = N * lam * p_min
    down = np.array([(lengths == k).sum() for k in range(1, k_max + 1)], dtype=float)
    return up, down


@dataclass(frozen=True)
class DeviationReport:
    sup_dev: np.ndarray
    scaled_sup: np.ndarray
    max_scaled: float
    occupied_m: bool
    occupied_m1: bool
    t1: float
    t4: float


def path_statistics(path: SamplePath, fluid: FluidPath, a, m: int) -> DeviationReport:
    """Deviation summary of one path against the fluid limit.

    Uses the event-time suprema recorded during simulation when present;
    otherwise falls back to the observation grid.  ``t4`` is the first
    recorded threshold crossing over levels ``1..m-1``.
    """
    a = np.asarray(a, dtype=float)
    if np.all(np.isnan(path.sup_dev)):
        if not np.all(np.isin(np.round(path.obs_times, 12), np.round(fluid.times, 12))):
            raise ValueError("observation grid does not match the fluid grid")
        x = fluid.at(path.obs_times)
        sup = np.abs(path.fractions - x).max(axis=0)
    else:
        sup = path.sup_dev
    N = path.n_servers
    low = slice(0, m - 1)
    scaled = math.sqrt(N) * sup[low] / np.sqrt(a[low])
    K = len(sup)
    occ = lambda k: k <= K and np.isfinite(path.first_positive[k - 1])
    t1 = path.first_positive[m] if m < K else np.inf
    t4 = float(np.min(path.first_hit[low])) if m > 1 else np.inf
    return DeviationReport(
        sup_dev=sup,
        scaled_sup=scaled,
        max_scaled=float(scaled.max()) if scaled.size else 0.0,
        occupied_m=bool(occ(m)),
        occupied_m1=bool(occ(m + 1)),
        t1=float(t1),
        t4=t4,
    )
