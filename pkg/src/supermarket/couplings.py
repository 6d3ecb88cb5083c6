"""The two couplings: jump refinement (X, W) and the M/M/inf cutoff level."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .ctmc import (
    SamplePath,
    TruncationOverflow,
    _event_capacity,
    _fluid_arrays,
    _obs_grid,
    as_stream,
)
from .fluid import FluidPath, propagator_solve
from .model import ModelParams, check_counts, derived_constants, drift, rates

log = logging.getLogger(__name__)


@dataclass
class JumpCoupledPath:
    """Chain X and jump refinement gamma~ driven by the shared marks W.

    ``kinds`` counts accepted atoms as (joint, X-only, W-only).
    ``marks[0 or 1, k-1]`` counts up/down W marks at level k.
    """

    n_servers: int
    obs_times: np.ndarray
    counts: np.ndarray
    gamma: np.ndarray
    fluid_at_obs: np.ndarray
    sup_dev: np.ndarray
    sup_dev_tilde: np.ndarray
    sup_gamma: np.ndarray
    hit4: np.ndarray
    hit6: np.ndarray
    t5: float
    first_positive: np.ndarray
    marks: np.ndarray
    kinds: np.ndarray
    stopped: bool
    stop_time: float
    mark_log: np.ndarray | None = None

    @property
    def x_tilde(self) -> np.ndarray:
        return self.fluid_at_obs + self.gamma / math.sqrt(self.n_servers)

    def to_csv(self, path, m: int) -> None:
        K = self.counts.shape[1]
        head = (["t"] + [f"X{k}" for k in range(1, K + 1)]
                + [f"gamma{k}" for k in range(1, m + 1)] + ["stopped"])
        X = self.counts / self.n_servers
        with open(path, "w") as fh:
            fh.write(",".join(head) + "\n")
            for i, t in enumerate(self.obs_times):
                row = [repr(float(t))] + [repr(float(v)) for v in X[i]]
                row += [repr(float(v)) for v in self.gamma[i, :m]] + [str(int(self.stopped))]
                fh.write(",".join(row) + "\n")


def fluid_rate_envelope(fluid: FluidPath, refine: int = 4, margin: float = 1e-3) -> np.ndarray:
    """Per-level sup over time of ``lambda_+^k(x_t)`` and ``lambda_-^k(x_t)``."""
    t = np.linspace(0.0, fluid.t_end, refine * (len(fluid.times) - 1) + 1)
    xs = fluid.at(t)
    env = np.zeros((2, fluid.k_max))
    for x in xs:
        p, q = rates(x, fluid.lam, fluid.d)
        np.maximum(env[0], p, out=env[0])
        np.maximum(env[1], q, out=env[1])
    return env * (1.0 + margin) + 1e-300


def _thr(v, K):
    return np.full(K, np.inf) if v is None else np.broadcast_to(np.asarray(v, float), (K,)).copy()


def simulate_jump_coupling(
    params: ModelParams,
    fluid: FluidPath,
    counts0,
    obs_times=None,
    rng=0,
    m: int | None = None,
    R=None,
    R_tilde=None,
    r=None,
    force_joint: bool = False,
    jumps: bool = True,
    compensator: bool = True,
    record_marks: bool = False,
    hmax: float | None = None,
) -> JumpCoupledPath:
    """Simulate the joint chain (X, W) and the linear jump process gamma~.

    Candidate atoms arrive per level and sign at the rate
    ``N max(lambda(X), sup_t lambda(x_t))``, which dominates both kernels;
    each is split into a joint part (rate ``N min``), an X-only part and a
    W-only part.  Between atoms gamma~ solves
    ``g' = -sqrt(N) b(x_t) + J(x_t) g`` by RK4 and it jumps by
    ``+-1/sqrt(N)`` at W marks.

    Thresholds ``R``, ``R_tilde`` and ``r`` define the first-hit times
    T4, T6 and T5 (levels ``1..m-1`` resp. level ``m``).  An envelope
    violation stops the path and sets ``stopped``.
    """
    N = params.n_servers
    K = params.k_max
    counts0 = check_counts(counts0, N)
    if counts0.shape != (K,):
        raise ValueError(f"counts must have length k_max={K}")
    t_end = params.t0
    obs = _obs_grid(obs_times, t_end)
    fdt, fs, fd = _fluid_arrays(fluid, K, t_end)
    m = params.m if m is None else int(m)
    a = params.a
    low = np.arange(K) < m - 1
    thr4 = np.full(K, np.inf)
    thr6 = np.full(K, np.inf)
    if R is not None:
        thr4[low] = R * np.sqrt(a[low] / N)
    if R_tilde is not None:
        thr6[low] = R_tilde * a[low] ** 0.25 / N**0.75
    thr5 = np.inf if r is None else r * math.sqrt(a[m - 1])
    env = fluid_rate_envelope(fluid)
    hmax = fluid.dt if hmax is None else float(hmax)
    stream = as_stream(rng)
    cap = _event_capacity(N, params.lam, t_end) if record_marks else 0
    while True:
        mk_t = np.empty(cap)
        mk_lvl = np.empty(cap, np.int64)
        mk_sign = np.empty(cap, np.int64)
        out = _kernels.jump_kernel(
            counts0, float(N), params.lam, params.d, t_end, obs, stream.kernel_seed,
            fdt, fs, fd, env, hmax, bool(force_joint), bool(jumps), bool(compensator),
            thr4, thr6, float(thr5), m, mk_t, mk_lvl, mk_sign, bool(record_marks),
        )
        status = out[12]
        if status == _kernels.LOG_FULL:
            cap *= 2
            continue
        break
    (obs_n, obs_g, sup_x, sup_xt, sup_g, hit4, hit6, t5, first_pos,
     marks, kinds, nmk, status, t_stop) = out
    if status == _kernels.OVERFLOW:
        raise TruncationOverflow(f"level k_max={K} would become occupied")
    mark_log = None
    if record_marks:
        mark_log = np.rec.fromarrays(
            [mk_t[:nmk], mk_lvl[:nmk], mk_sign[:nmk]], names=["t", "level", "sign"]
        )
    return JumpCoupledPath(
        n_servers=N,
        obs_times=obs,
        counts=obs_n,
        gamma=obs_g,
        fluid_at_obs=fluid.at(obs),
        sup_dev=sup_x,
        sup_dev_tilde=sup_xt,
        sup_gamma=sup_g,
        hit4=hit4,
        hit6=hit6,
        t5=float(t5),
        first_positive=first_pos,
        marks=marks,
        kinds=kinds,
        stopped=status == _kernels.ENVELOPE,
        stop_time=float(t_stop),
        mark_log=mark_log,
    )


def _simpson(values, h):
    n = len(values) - 1
    if n % 2:
        raise ValueError("Simpson's rule needs an even number of intervals")
    w = np.ones(n + 1)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    return h / 3.0 * np.tensordot(w, values, axes=1)


def gamma_tilde_from_marks(fluid: FluidPath, mark_log, t: float, n_servers: int,
                           nodes: int = 64, compensator: bool = True) -> np.ndarray:
    """gamma~_t through the propagator representation.

    ``sqrt(N) * (sum_i Phi_{t,s_i} y_i - int_0^t Phi_{t,s} b(x_s) ds)`` with
    ``y_i = +-e_k / N``; the integral by composite Simpson on ``nodes``
    intervals.  Cost grows with the number of marks, so this is a
    cross-check for short, sparse paths.
    """
    K = fluid.k_max
    total = np.zeros(K)
    for s, lvl, sign in zip(mark_log["t"], mark_log["level"], mark_log["sign"]):
        if s <= t:
            total += propagator_solve(fluid, float(s), t).matrix[:, lvl - 1] * sign / n_servers
    if compensator and t > 0:
        ss = np.linspace(0.0, t, nodes + 1)
        vals = np.array([
            propagator_solve(fluid, float(s), t).matrix @ drift(fluid.at(s), fluid.lam, fluid.d)
            for s in ss
        ])
        total -= _simpson(vals, t / nodes)
    return math.sqrt(n_servers) * total


@dataclass
class MomentCheck:
    levels: np.ndarray
    mean_sup_sq: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    bound: np.ndarray
    violated: np.ndarray
    t5_frequency: float | None = None

    @property
    def ok(self) -> bool:
        return not bool(self.violated.any())


def moment_bound(params: ModelParams) -> np.ndarray:
    """``8 (rho^d + 1) t0 exp(2 L t0^2) a_k`` for every level."""
    c = derived_constants(params)
    t0 = params.t0
    return 8.0 * (params.rho**params.d + 1.0) * t0 * math.exp(2 * c.L * t0**2) * params.a


def gamma_tilde_moments(paths, params: ModelParams, r: float | None = None,
                        z: float = 2.576) -> MomentCheck:
    """Empirical ``E sup_t |gamma~^k_t|^2`` per level against the moment bound.

    A level is flagged when the lower confidence limit exceeds the bound.
    With ``r`` also reports how often ``sup |gamma~^m| > r sqrt(a_m)``.
    """
    if len(paths) < 100:
        raise ValueError("need at least 100 replicas")
    sq = np.array([p.sup_gamma for p in paths]) ** 2
    mean = sq.mean(axis=0)
    se = sq.std(axis=0, ddof=1) / math.sqrt(len(paths))
    bound = moment_bound(params)
    low, high = mean - z * se, mean + z * se
    freq = None
    if r is not None:
        m = params.m
        freq = float(np.mean(sq[:, m - 1] > r**2 * params.a[m - 1]))
    return MomentCheck(
        levels=np.arange(1, params.k_max + 1),
        mean_sup_sq=mean,
        ci_low=low,
        ci_high=high,
        bound=bound,
        violated=low > bound,
        t5_frequency=freq,
    )


@dataclass
class CutoffCoupledPath:
    """Chain X with level m built from shared atoms, and the M/M/inf count.

    ``hat_counts`` is ``N X^_m`` at the observation times.  X freezes at T1.
    Stopping times are ``inf`` when not hit by ``t0``.
    """

    n_servers: int
    m: int
    obs_times: np.ndarray
    counts: np.ndarray
    hat_counts: np.ndarray
    sup_dev: np.ndarray
    hit4: np.ndarray
    t1: float
    t2: float
    t3: float
    n_atoms: int
    accepted: np.ndarray
    height: float
    regenerations: int = 0


def strip_height(params: ModelParams, m: int, safety: float = 2.0) -> float:
    """``safety * N lam (sigma a_{m-1})^d``, the atom strip used for level m."""
    sigma = params.rho + 1.0
    return safety * params.n_servers * params.lam * (sigma * params.a[m - 2]) ** params.d


def simulate_cutoff_coupling(
    params: ModelParams,
    fluid: FluidPath,
    counts0,
    m: int | None = None,
    rng=0,
    obs_times=None,
    r: float | None = None,
    R: float | None = None,
    height: float | None = None,
    atoms: bool = True,
) -> CutoffCoupledPath:
    """Couple level m of the chain with an M/M/inf queue via shared atoms.

    Atoms ``(s, x, u)`` form a Poisson process on ``(0, t0] x (0, H]`` with
    exponential marks ``u``; an atom enters X when
    ``x <= N lam (X^{m-1}_{s-})^d`` and the M/M/inf queue when
    ``x <= N lam (x^{m-1}_s)^d``, and lives for ``u``.  The initial level-m
    occupants are shared by both.  A strip overflow reruns the replica with
    the height doubled.
    """
    N = params.n_servers
    K = params.k_max
    m = params.m if m is None else int(m)
    if not 2 <= m <= K - 2:
        raise ValueError("need 2 <= m <= k_max - 2")
    counts0 = check_counts(counts0, N)
    if counts0[m] != 0 or counts0[m:].any():
        log.warning("initial state occupies level m+1; cutoff coupling assumes it is empty")
    t_end = params.t0
    obs = _obs_grid(obs_times, t_end)
    fdt, fs, fd = _fluid_arrays(fluid, K, t_end)
    thr4 = np.full(K, np.inf)
    if R is not None:
        thr4[: m - 1] = R * np.sqrt(params.a[: m - 1] / N)
    hat_cap = np.inf if r is None else N * r * params.a[m - 1]
    H = strip_height(params, m) if height is None else float(height)
    stream = as_stream(rng)
    regen = 0
    cap = int(4 * (H * t_end + counts0[m - 1]) + 100)
    while True:
        out = _kernels.cutoff_kernel(
            counts0, float(N), params.lam, params.d, m, t_end, obs, stream.kernel_seed,
            fdt, fs, fd, H, bool(atoms), thr4, float(hat_cap), cap,
        )
        status = out[-1]
        if status == _kernels.STRIP:
            H *= 2
            regen += 1
            log.info("strip overflow, regenerating with height %g", H)
            continue
        if status == _kernels.LOG_FULL:
            cap *= 2
            continue
        break
    obs_n, obs_h, sup, hit4, T1, T2, T3, n_atoms, n_acc, _ = out
    return CutoffCoupledPath(
        n_servers=N,
        m=m,
        obs_times=obs,
        counts=obs_n,
        hat_counts=obs_h,
        sup_dev=sup,
        hit4=hit4,
        t1=float(T1),
        t2=float(T2),
        t3=float(T3),
        n_atoms=int(n_atoms),
        accepted=n_acc,
        height=H,
        regenerations=regen,
    )


def mminf_poisson_mean(fluid: FluidPath, m: int, n_servers: int, t: float,
                       nodes: int = 512) -> float:
    """``int_0^t exp(-(t-s)) N lam (x^{m-1}_s)^d ds`` by Simpson's rule."""
    s = np.linspace(0.0, t, nodes + 1)
    x = fluid.at(s)[:, m - 2]
    vals = np.exp(-(t - s)) * n_servers * fluid.lam * np.maximum(x, 0) ** fluid.d
    return float(_simpson(vals, t / nodes))


@dataclass
class StoppingTimes:
    """First-hit times T1..T8 (``None`` when not reached by t0 or not
    observable) and the minimum over the observed subset."""

    times: dict
    t0: float
    thresholds: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def T(self) -> float:
        vals = [v for v in self.times.values() if v is not None]
        return min(vals + [self.t0])

    @property
    def first(self) -> str | None:
        """Name of the stopping time attaining ``T < t0``, if any."""
        hit = {k: v for k, v in self.times.items() if v is not None and v < self.t0}
        return min(hit, key=hit.get) if hit else None

    def to_json(self) -> str:
        body = {f"T{i}": self.times.get(f"T{i}") for i in range(1, 9)}
        body.update(thresholds=self.thresholds, seed=self.seed, t0=self.t0)
        return json.dumps(body, sort_keys=True)


def _finite(v, t0):
    return None if v is None or not np.isfinite(v) or v > t0 else float(v)


def _replay_first_hit(path: SamplePath, fluid: FluidPath, thr: np.ndarray) -> float:
    ev = path.events
    if ev is None:
        raise ValueError("sample path has no event log")
    K = len(thr)
    counts0 = np.asarray(path.meta["counts0"], dtype=np.int64)
    inc = np.zeros((len(ev), K), dtype=np.int64)
    sign = np.where(ev["type"] == 0, 1, -1)
    inc[np.arange(len(ev)), ev["level"].astype(int) - 1] = sign
    after = counts0 + np.cumsum(inc, axis=0)
    before = np.vstack([counts0[None, :], after[:-1]])
    N = path.n_servers
    t = ev["t"]
    x = fluid.at(t) if len(t) else np.zeros((0, K))
    exceed = (np.abs(before / N - x) > thr) | (np.abs(after / N - x) > thr)
    if np.any(np.abs(counts0 / N - fluid.at(0.0)) > thr):
        return 0.0
    rows = np.flatnonzero(exceed.any(axis=1))
    return float(t[rows[0]]) if rows.size else math.inf


def detect_stopping_times(
    t0: float,
    a,
    m: int,
    n_servers: int,
    *,
    fluid: FluidPath | None = None,
    sample: SamplePath | None = None,
    cutoff: CutoffCoupledPath | None = None,
    jump: JumpCoupledPath | None = None,
    gaussian=None,
    R: float | None = None,
    r: float | None = None,
    replica: int = 0,
) -> StoppingTimes:
    """Collect the first-hit times observable from the supplied paths.

    From a sample path with an event log, T1 and T4 (threshold ``R``) are
    found by replaying the events exactly.  Coupled paths carry the times
    recorded during simulation.  T7 is read off a Gaussian path on its grid
    with threshold ``r`` (replica ``replica``).  T8 needs the pathwise diffusion coupling, which is
    not constructed, so it is never observed.
    """
    a = np.asarray(a, dtype=float)
    times = {f"T{i}": None for i in range(1, 9)}
    thresholds = {"R": R, "r": r}
    if sample is not None:
        K = sample.counts.shape[1]
        times["T1"] = _finite(sample.first_positive[m] if m < K else math.inf, t0)
        if R is not None:
            if fluid is None:
                raise ValueError("T4 needs the fluid path")
            thr = np.full(K, np.inf)
            thr[: m - 1] = R * np.sqrt(a[: m - 1] / n_servers)
            times["T4"] = _finite(_replay_first_hit(sample, fluid, thr), t0)
    if cutoff is not None:
        times["T1"] = _finite(cutoff.t1, t0)
        times["T2"] = _finite(cutoff.t2, t0)
        times["T3"] = _finite(cutoff.t3, t0)
        times["T4"] = _finite(cutoff.hit4[: m - 1].min(), t0)
    if jump is not None:
        times["T1"] = _finite(jump.first_positive[m] if m < len(a) else math.inf, t0)
        times["T4"] = _finite(jump.hit4[: m - 1].min(), t0)
        times["T5"] = _finite(jump.t5, t0)
        times["T6"] = _finite(jump.hit6[: m - 1].min(), t0)
    if gaussian is not None and r is not None:
        g = np.abs(gaussian.gamma[:, replica, m - 1])
        hit = np.flatnonzero(g > r * math.sqrt(a[m - 1]))
        times["T7"] = _finite(gaussian.times[hit[0]] if hit.size else math.inf, t0)
    return StoppingTimes(times=times, t0=t0, thresholds=thresholds)
