"""Configuration-driven experiment runs and their result bundles.

A config is a TOML file with flat top-level keys plus optional
``[thresholds]`` and ``[options]`` tables; see ``CONFIG_KEYS`` and the
README for the grammar.  ``run_experiment`` executes the pipeline of the
config's mode and writes a bundle directory::

    summary.json      schema-versioned summary, byte-reproducible
    timing.json       wall-clock timings (not reproducible by nature)
    <table>.csv       tidy tables, one per aggregate
"""
from __future__ import annotations

import csv
import json
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import skew

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .bounds import (BoundInputs, bound_report, bound_vs_frequency, bounds_pp, bounds_qq,
                     bounds_rr, first_n_satisfying_pp, theorem_schedules)
from .couplings import (_simpson, detect_stopping_times, mminf_poisson_mean,
                        simulate_cutoff_coupling, simulate_jump_coupling)
from .ctmc import (RngStream, TruncationOverflow, kernel_transition_rates, lengths_from_counts,
                   path_statistics, queue_transition_rates, simulate_queues, simulate_tail,
                   tail_counts)
from .diffusion import (check_gt_bound, covariance_by_propagator, covariance_solve,
                        simulate_gamma)
from .fluid import fluid_solve, propagator_solve
from .model import (ModelParams, TruncationError, drift, drift_gradient, rates,
                    rounded_scales, scaled_norm, scaled_ratios)
from .stats import ks_two_sample, poisson_dispersion_test, wilson_interval

SCHEMA_VERSION = 1
OUTPUT_ENV = "SUPERMARKET_OUTPUT_DIR"
MODES = ("fixed-point", "fluid", "equivalence", "lln", "cutoff", "jump", "diffusion",
         "gt-bound", "bounds-audit", "numerics")
STARTS = ("empty", "rounded-a", "rounded-a-truncated", "fixed-point")
CONFIG_KEYS = {
    "name", "mode", "lambda", "d", "n_list", "t0", "replicas", "base_seed", "dt", "k_max",
    "A", "rho", "initial_state", "thresholds", "output_dir", "n_jobs", "options", "checks",
}
PLOT_COLUMNS = {
    "deviation": ["mode", "N", "level", "quantile05", "median", "quantile95", "n_replicas"],
    "variance": ["mode", "N", "level", "t", "var_empirical", "var_ode"],
    "occupancy": ["mode", "N", "event", "frequency", "ci_low", "ci_high"],
}
FAILURE_LIMIT = 0.01


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    mode: str
    lam: tuple
    d: tuple
    n_list: tuple
    t0: float = 1.0
    replicas: int = 1
    base_seed: int = 0
    dt: float = 2.0**-8
    k_max: int | None = None
    A: float | None = None
    rho: float = 1.0
    initial_state: object = "rounded-a"
    thresholds: dict = field(default_factory=dict)
    output_dir: str = "results"
    n_jobs: int = 1
    options: dict = field(default_factory=dict)
    checks: tuple | None = None

    @property
    def lam0(self) -> float:
        return self.lam[0]

    @property
    def d0(self) -> int:
        return self.d[0]

    def opt(self, key, default):
        return self.options.get(key, default)

    def echo(self) -> dict:
        return {
            "name": self.name, "mode": self.mode, "lambda": list(self.lam), "d": list(self.d),
            "n_list": list(self.n_list), "t0": self.t0, "replicas": self.replicas,
            "base_seed": self.base_seed, "dt": self.dt,
            "k_max": "auto" if self.k_max is None else self.k_max,
            "A": "paper-default" if self.A is None else self.A, "rho": self.rho,
            "initial_state": (self.initial_state if isinstance(self.initial_state, str)
                              else list(self.initial_state)),
            "thresholds": dict(self.thresholds), "n_jobs": self.n_jobs,
            "options": self.options, "checks": None if self.checks is None else list(self.checks),
        }


def _as_tuple(v, kind, key):
    vals = v if isinstance(v, list) else [v]
    if not vals:
        raise ConfigError(f"{key} must not be empty")
    try:
        out = tuple(kind(x) for x in vals)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {v!r}") from e
    if kind is int and any(x != y for x, y in zip(out, vals)):
        raise ConfigError(f"{key} must be integers")
    return out


def _threshold(key, v):
    if isinstance(v, str):
        if not v.startswith("auto-percentile:"):
            raise ConfigError(f"threshold {key} must be a number or 'auto-percentile:q'")
        try:
            q = float(v.split(":", 1)[1])
        except ValueError as e:
            raise ConfigError(f"bad percentile in {v!r}") from e
        if not 0 < q < 1:
            raise ConfigError(f"percentile must lie in (0, 1), got {q}")
        return v
    if not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"threshold {key} must be positive")
    return float(v)


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a parsed TOML table and build the config."""
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    for key in ("name", "mode", "lambda", "d", "n_list"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    mode = data["mode"]
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    lam = _as_tuple(data["lambda"], float, "lambda")
    if not all(0 < x < 1 for x in lam):
        raise ConfigError("lambda must lie in (0, 1)")
    d = _as_tuple(data["d"], int, "d")
    if not all(x >= 2 for x in d):
        raise ConfigError("d must be >= 2")
    n_list = _as_tuple(data["n_list"], int, "n_list")
    if not all(n >= 1 for n in n_list):
        raise ConfigError("n_list entries must be >= 1")
    replicas = int(data.get("replicas", 1))
    if replicas < 1:
        raise ConfigError("replicas must be >= 1")
    t0 = float(data.get("t0", 1.0))
    dt = float(data.get("dt", 2.0**-8))
    if not (t0 > 0 and dt > 0):
        raise ConfigError("t0 and dt must be positive")
    k_max = data.get("k_max", "auto")
    if k_max == "auto":
        k_max = None
    elif not isinstance(k_max, int) or k_max < 3:
        raise ConfigError("k_max must be 'auto' or an integer >= 3")
    A = data.get("A", "paper-default")
    if A == "paper-default":
        A = None
    elif not isinstance(A, (int, float)) or A < 1:
        raise ConfigError("A must be 'paper-default' or a number >= 1")
    rho = float(data.get("rho", 1.0))
    if rho < 1:
        raise ConfigError("rho must be >= 1")
    start = data.get("initial_state", "rounded-a")
    if isinstance(start, list):
        if not all(isinstance(c, int) and c >= 0 for c in start):
            raise ConfigError("explicit initial_state must be nonnegative integer counts")
        start = tuple(start)
    elif start not in STARTS:
        raise ConfigError(f"initial_state must be one of {STARTS} or a list of counts")
    thresholds = {k: _threshold(k, v) for k, v in data.get("thresholds", {}).items()}
    bad = set(thresholds) - {"R", "R_tilde", "R_bar", "r"}
    if bad:
        raise ConfigError(f"unknown thresholds: {sorted(bad)}")
    n_jobs = int(data.get("n_jobs", 1))
    checks = data.get("checks")
    return ExperimentConfig(
        name=str(data["name"]), mode=mode, lam=lam, d=d, n_list=n_list, t0=t0,
        replicas=replicas, base_seed=int(data.get("base_seed", 0)), dt=dt,
        k_max=None if k_max is None else int(k_max), A=None if A is None else float(A),
        rho=rho, initial_state=start, thresholds=thresholds,
        output_dir=str(data.get("output_dir", "results")), n_jobs=n_jobs,
        options=dict(data.get("options", {})),
        checks=None if checks is None else tuple(str(c) for c in checks),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return parse_config(data)


# --- plumbing -----------------------------------------------------------

@dataclass
class Check:
    passed: bool
    value: object = None
    threshold: object = None
    detail: str = ""

    def as_dict(self):
        return {"passed": bool(self.passed), "value": self.value,
                "threshold": self.threshold, "detail": self.detail}


@dataclass
class _Failure:
    index: int
    seed: int
    error: str


def _call(fn, args, index, seed):
    try:
        return fn(*args, seed)
    except (TruncationOverflow, TruncationError, FloatingPointError, ValueError) as e:
        return _Failure(index, seed.seed, f"{type(e).__name__}: {e}")


class _Batches:
    """Replica dispatch with per-replica failure isolation."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.failures: list[dict] = []
        self.attempted = 0

    def seeds(self, n, stream=0):
        return [RngStream(self.cfg.base_seed ^ i, stream) for i in range(n)]

    def run(self, label, fn, args, n, stream=0):
        seeds = self.seeds(n, stream)
        if self.cfg.n_jobs == 1:
            out = [_call(fn, args, i, s) for i, s in enumerate(seeds)]
        else:
            from joblib import Parallel, delayed
            out = Parallel(n_jobs=self.cfg.n_jobs)(
                delayed(_call)(fn, args, i, s) for i, s in enumerate(seeds))
        self.attempted += n
        good = []
        for r in out:
            if isinstance(r, _Failure):
                self.failures.append({"batch": label, "replica": r.index, "seed": r.seed,
                                      "error": r.error})
            else:
                good.append(r)
        return good


def _params(cfg, N, lam=None, d=None, t0=None):
    return ModelParams(lam=cfg.lam0 if lam is None else lam, d=cfg.d0 if d is None else d,
                       n_servers=N, t0=cfg.t0 if t0 is None else t0, rho=cfg.rho,
                       k_max=cfg.k_max, threshold=cfg.A)


def _counts0(start, p: ModelParams):
    if isinstance(start, tuple):
        c = np.zeros(p.k_max, np.int64)
        c[: len(start)] = start
        return c
    if start == "empty":
        return np.zeros(p.k_max, np.int64)
    if start == "rounded-a":
        return rounded_scales(p)
    if start == "rounded-a-truncated":
        return rounded_scales(p, truncate_at=p.m - 1)
    raise ConfigError(f"initial state {start!r} has no integer counts")


def _x0(start, p: ModelParams):
    if start == "fixed-point":
        return p.a.copy()
    return _counts0(start, p) / p.n_servers


def _quiet_scales():
    warnings.filterwarnings("ignore", message=r"a_k underflows", category=RuntimeWarning)


def _quantiles(v):
    v = np.asarray(v, float)
    q = np.quantile(v, [0.05, 0.5, 0.95])
    return float(q[0]), float(q[1]), float(q[2])


def _auto(cfg, key, pilot_stat):
    """Resolve a threshold, calibrating 'auto-percentile:q' on a pilot batch."""
    v = cfg.thresholds.get(key)
    if isinstance(v, str):
        q = float(v.split(":", 1)[1])
        stat = pilot_stat()
        return float(np.quantile(stat, q)), {"calibrated": True, "percentile": q,
                                             "pilot_size": int(len(stat))}
    return v, {"calibrated": False}


def _freq_row(mode, N, event, hits, n):
    lo, hi = wilson_interval(hits, n)
    return {"mode": mode, "N": N, "event": event, "frequency": hits / n if n else None,
            "ci_low": lo, "ci_high": hi}


# --- replica workers (module level so they pickle) ----------------------

def _tail_worker(p, counts0, fluid, obs, thr, record, seed):
    return simulate_tail(p, counts0, obs_times=obs, rng=seed, fluid=fluid, thresholds=thr,
                         record_events=record)


def _queue_worker(p, lengths, obs, seed):
    return simulate_queues(p, lengths, obs_times=obs, rng=seed)


def _cutoff_worker(p, fluid, counts0, r, R, seed):
    return simulate_cutoff_coupling(p, fluid, counts0, rng=seed, obs_times=[p.t0], r=r, R=R)


def _jump_worker(p, fluid, counts0, R, R_tilde, r, seed):
    return simulate_jump_coupling(p, fluid, counts0, obs_times=[p.t0], rng=seed,
                                  R=R, R_tilde=R_tilde, r=r)


# --- modes ----------------------------------------------------------------

def _mode_fixed_point(cfg, batches):
    tol = float(cfg.opt("tol", 1e-12))
    k_max = cfg.k_max or 12
    rows = []
    for lam in cfg.lam:
        for d in cfg.d:
            p = ModelParams(lam=lam, d=d, n_servers=cfg.n_list[0], k_max=k_max, threshold=cfg.A)
            a = p.a
            res = scaled_norm(drift(a, lam, d), a)
            rows.append({"lambda": lam, "d": d, "k_max": k_max, "residual": res})
    worst = max(r["residual"] for r in rows)
    checks = {"fixed_point_residual": Check(worst < tol, worst, tol,
                                            "max scaled_norm(b(a)) over lambda x d")}
    return {"fixed_point": rows}, {"max_residual": worst}, checks


def _mode_fluid(cfg, batches):
    N = cfg.n_list[0]
    tol_stat = float(cfg.opt("stationary_tol", 1e-10))
    target = float(cfg.opt("attraction_target", 0.01))
    t_end = float(cfg.opt("attraction_t_end", 64.0))
    g0 = float(cfg.opt("attraction_grid_start", 8.0))
    p = _params(cfg, N)
    a = p.a
    stat = fluid_solve(p, a, dt=cfg.dt)
    dev = max(scaled_norm(x - a, a) for x in stat.states)
    main = fluid_solve(p, np.zeros(p.k_max), dt=cfg.dt, t_end=t_end)
    ref = fluid_solve(p, np.zeros(p.k_max), dt=cfg.dt / 16, t_end=t_end, check=False)
    ref_dist = scaled_ratios(ref.states - a, a).max(axis=1)
    below = np.flatnonzero(ref_dist < target)
    t_star = float(ref.times[below[0]]) if below.size else math.inf
    grid = [g0 * 2**j for j in range(int(math.floor(math.log2(t_end / g0))) + 1)]
    dist = [scaled_norm(main.at(t) - a, a) for t in grid]
    rows = [{"t": t, "distance": v} for t, v in zip(grid, dist)]
    strict = all(b < a_ for a_, b in zip(dist, dist[1:]))
    fine = scaled_ratios(main.states - a, a).max(axis=1)
    at_star = scaled_norm(main.at(t_star) - a, a) if math.isfinite(t_star) else math.inf
    results = {
        "stationary_sup_deviation": dev, "t_star": t_star, "distance_at_t_star": at_star,
        "doubling_grid": grid, "fine_grid_non_increasing": bool(np.all(np.diff(fine) <= 0)),
        "halving_error": main.halving_error, "reference_dt": cfg.dt / 16,
    }
    checks = {
        "stationary": Check(dev < tol_stat, dev, tol_stat, "sup scaled deviation from a"),
        "strictly_decreasing": Check(strict, dist, None, "distance on the doubling grid"),
        "attraction": Check(at_star < target, at_star, target, f"distance at T*={t_star}"),
        "converged": Check(bool(main.converged and stat.converged), main.halving_error, 1e-8),
    }
    return {"attraction": rows}, results, checks


def _mode_equivalence(cfg, batches):
    N = cfg.n_list[0]
    p = _params(cfg, N)
    c0 = _counts0(cfg.initial_state, p)
    lengths = lengths_from_counts(c0, N)
    obs = [cfg.t0]
    tail = batches.run("tail", _tail_worker, (p, c0, None, obs, None, False), cfg.replicas, 0)
    queue = batches.run("queue", _queue_worker, (p, lengths, obs), cfg.replicas, 1)
    Xt = np.array([s.fractions[-1] for s in tail])
    Xq = np.array([s.fractions[-1] for s in queue])
    rows, checks = [], {}
    alpha = float(cfg.opt("ks_level", 0.01))
    for k in (1, 2):
        stat, pv = ks_two_sample(Xt[:, k - 1], Xq[:, k - 1])
        rows.append({"level": k, "mean_tail": float(Xt[:, k - 1].mean()),
                     "mean_queue": float(Xq[:, k - 1].mean()), "ks": stat, "p_value": pv})
        checks[f"ks_level{k}"] = Check(pv >= alpha, pv, alpha, "KS p-value, tail vs queue")
    gen = RngStream(cfg.base_seed, 3).generator()
    n_states = int(cfg.opt("generator_states", 100))
    mismatches = 0
    for _ in range(n_states):
        L = np.minimum(gen.geometric(gen.uniform(0.3, 0.9), size=N) - 1, p.k_max)
        up_q, down_q = queue_transition_rates(L, p.lam, p.d, p.k_max)
        up_k, down_k = kernel_transition_rates(tail_counts(L, p.k_max), N, p.lam, p.d)
        mismatches += not (np.array_equal(up_q, up_k) and np.array_equal(down_q, down_k))
    checks["generator_rates"] = Check(mismatches == 0, mismatches, 0,
                                      f"states with unequal rates out of {n_states}")
    return {"equivalence": rows}, {"generator_states": n_states}, checks


def _mode_lln(cfg, batches):
    if len(cfg.n_list) < 2:
        raise ConfigError("lln mode needs at least two values in n_list")
    dev_rows, occ_rows, rep_rows = [], [], []
    medians, unscaled, per_n = [], [], {}
    for N in cfg.n_list:
        p = _params(cfg, N)
        c0 = _counts0(cfg.initial_state, p)
        fl = fluid_solve(p, c0 / N, dt=cfg.dt)
        m = p.m
        a = p.a

        def pilot():
            paths = batches.run(f"pilot-N{N}", _tail_worker, (p, c0, fl, None, None, False),
                                int(cfg.opt("pilot_replicas", 50)), 1)
            return [path_statistics(s, fl, a, m).max_scaled for s in paths]

        R, r_info = _auto(cfg, "R", pilot)
        thr = None
        if R is not None:
            thr = np.full(p.k_max, np.inf)
            thr[: m - 1] = R * np.sqrt(a[: m - 1] / N)
        paths = batches.run(f"N{N}", _tail_worker, (p, c0, fl, None, thr, False), cfg.replicas)
        stats_ = [path_statistics(s, fl, a, m) for s in paths]
        scaled = np.array([s.scaled_sup for s in stats_])
        for k in range(1, m):
            q05, med, q95 = _quantiles(scaled[:, k - 1])
            dev_rows.append({"mode": "lln", "N": N, "level": k, "quantile05": q05,
                             "median": med, "quantile95": q95, "n_replicas": len(paths)})
        mx = np.array([s.max_scaled for s in stats_])
        u1 = np.array([s.sup_dev[0] for s in stats_])
        medians.append(float(np.median(mx)))
        unscaled.append(float(np.median(u1)))
        n = len(stats_)
        t1 = sum(s.occupied_m1 for s in stats_)
        occ_rows.append(_freq_row("lln", N, "X^{m+1}>0", t1, n))
        t4 = sum(s.t4 <= cfg.t0 for s in stats_) if R is not None else None
        if R is not None:
            occ_rows.append(_freq_row("lln", N, "T4<=t0", t4, n))
        for i, s in enumerate(stats_):
            rep_rows.append({"N": N, "replica": i, "max_scaled": s.max_scaled,
                             "sup_dev_level1": float(s.sup_dev[0]), "t1": s.t1, "t4": s.t4})
        per_n[str(N)] = {"m": m, "k_max": p.k_max, "median_max_scaled": medians[-1],
                         "median_unscaled_level1": unscaled[-1], "R": R, "R_info": r_info,
                         "fluid_halving_error": fl.halving_error}
    ratio = max(medians) / min(medians)
    slope = float(np.polyfit(np.log(cfg.n_list), np.log(unscaled), 1)[0])
    lo, hi = cfg.opt("slope_range", [-0.65, -0.35])
    checks = {
        "scaled_median_ratio": Check(ratio < 2.0, ratio, 2.0, "max/min median scaled sup over N"),
        "unscaled_slope": Check(lo <= slope <= hi, slope, [lo, hi], "log-log slope, level 1"),
    }
    results = {"per_N": per_n, "median_ratio": ratio, "slope_level1": slope}
    return ({"deviation": dev_rows, "occupancy": occ_rows, "replicas": rep_rows},
            results, checks)


def _mode_cutoff(cfg, batches):
    occ_rows, rep_rows, per_n, checks = [], [], {}, {}
    limit = float(cfg.opt("frequency_limit", 0.2))
    z = float(cfg.opt("poisson_z", 3.0))
    for N in cfg.n_list:
        p = _params(cfg, N)
        c0 = _counts0(cfg.initial_state, p)
        fl = fluid_solve(p, c0 / N, dt=cfg.dt)
        m, t0 = p.m, cfg.t0
        r = cfg.thresholds.get("r")
        R = cfg.thresholds.get("R")
        paths = batches.run(f"N{N}", _cutoff_worker, (p, fl, c0, r, R), cfg.replicas)
        n = len(paths)
        h1 = sum(c.t1 <= t0 for c in paths)
        h2 = sum(c.t2 <= t0 for c in paths)
        occ_rows.append(_freq_row("cutoff", N, "X^{m+1}>0", h1, n))
        occ_rows.append(_freq_row("cutoff", N, "T2<=t0", h2, n))
        hat = np.array([c.hat_counts[-1] for c in paths], float)
        keep = math.exp(-t0)
        shared = c0[m - 1]
        mu_in = mminf_poisson_mean(fl, m, N, t0)
        mean = shared * keep + mu_in
        var = shared * keep * (1 - keep) + mu_in
        se_mean = math.sqrt(var / n)
        se_var = math.sqrt((var + 2 * var**2) / n)
        emp_mean, emp_var = float(hat.mean()), float(hat.var(ddof=1))
        for i, c in enumerate(paths):
            rep_rows.append({"N": N, "replica": i, "t1": c.t1, "t2": c.t2, "t3": c.t3,
                             "hat_m": int(c.hat_counts[-1]), "n_atoms": c.n_atoms,
                             "regenerations": c.regenerations})
        per_n[str(N)] = {
            "m": m, "k_max": p.k_max, "P_T1": h1 / n, "P_T1_ci": list(wilson_interval(h1, n)),
            "P_T2": h2 / n, "P_T2_ci": list(wilson_interval(h2, n)),
            "hat_mean": emp_mean, "hat_var": emp_var, "poisson_mean": mean, "poisson_var": var,
        }
        checks[f"N{N}_P_T1"] = Check(h1 / n < limit, h1 / n, limit, "P(X^{m+1} ever > 0)")
        checks[f"N{N}_P_T2"] = Check(h2 / n < limit, h2 / n, limit, "P(T2 <= t0)")
        checks[f"N{N}_poisson_mean"] = Check(abs(emp_mean - mean) <= z * se_mean,
                                             emp_mean, [mean, z * se_mean])
        checks[f"N{N}_poisson_var"] = Check(abs(emp_var - var) <= z * se_var,
                                            emp_var, [var, z * se_var])
    return {"occupancy": occ_rows, "replicas": rep_rows}, {"per_N": per_n}, checks


def _mark_means(fl, N, t0, nodes=256):
    s = np.linspace(0.0, t0, nodes + 1)
    pm = np.array([np.stack(rates(x, fl.lam, fl.d)) for x in fl.at(s)])
    return N * _simpson(pm, t0 / nodes)


def _mode_jump(cfg, batches):
    tol = float(cfg.opt("variance_tol", 0.15))
    alpha = float(cfg.opt("dispersion_level", 0.01))
    dev_rows, var_rows, occ_rows, per_n, checks = [], [], [], {}, {}
    medians, pvals = [], []
    for N in cfg.n_list:
        p = _params(cfg, N)
        c0 = _counts0(cfg.initial_state, p)
        fl = fluid_solve(p, c0 / N, dt=cfg.dt)
        cov = covariance_solve(fl, p)
        m, a, t0 = p.m, p.a, cfg.t0
        R = cfg.thresholds.get("R")
        r = cfg.thresholds.get("r")

        def pilot():
            paths = batches.run(f"pilot-N{N}", _jump_worker, (p, fl, c0, None, None, None),
                                int(cfg.opt("pilot_replicas", 50)), 1)
            return [float(np.max(N**0.75 * q.sup_dev_tilde[: m - 1] / a[: m - 1] ** 0.25))
                    for q in paths]

        R_t, rt_info = _auto(cfg, "R_tilde", pilot)
        paths = batches.run(f"N{N}", _jump_worker, (p, fl, c0, R, R_t, r), cfg.replicas)
        n = len(paths)
        g = np.array([q.gamma[-1] for q in paths])
        stat = np.array([N**0.75 * q.sup_dev_tilde[: m - 1] / a[: m - 1] ** 0.25 for q in paths])
        for k in range(1, m):
            q05, med, q95 = _quantiles(stat[:, k - 1])
            dev_rows.append({"mode": "jump", "N": N, "level": k, "quantile05": q05,
                             "median": med, "quantile95": q95, "n_replicas": n})
            var_rows.append({"mode": "jump", "N": N, "level": k, "t": t0,
                             "var_empirical": float(g[:, k - 1].var(ddof=1)),
                             "var_ode": float(cov.V[-1, k - 1, k - 1])})
        mx = stat.max(axis=1)
        medians.append(float(np.median(mx)))
        v11 = float(cov.V[-1, 0, 0])
        ratio = float(g[:, 0].var(ddof=1)) / v11
        checks[f"N{N}_variance"] = Check(abs(ratio - 1) <= tol, ratio, [1 - tol, 1 + tol],
                                         "Var(gamma~^1_t0) / V11(t0)")
        means = _mark_means(fl, N, t0)
        marks = np.array([q.marks for q in paths])
        tests = []
        for s_ in (0, 1):
            for k in range(1, m):
                res = poisson_dispersion_test(marks[:, s_, k - 1], float(means[s_, k - 1]))
                tests.append({"N": N, "sign": "+-"[s_], "level": k,
                              "mean": float(means[s_, k - 1]), **res})
                pvals += [res["p_mean"], res["p_dispersion"]]
        for name, hits in (("T5<=t0", sum(q.t5 <= t0 for q in paths)),
                           ("T6<=t0", sum(q.hit6[: m - 1].min() <= t0 for q in paths))):
            occ_rows.append(_freq_row("jump", N, name, hits, n))
        per_n[str(N)] = {"m": m, "k_max": p.k_max, "variance_ratio": ratio, "V11": v11,
                         "median_scaled_tilde": medians[-1], "R_tilde": R_t,
                         "R_tilde_info": rt_info, "stopped": int(sum(q.stopped for q in paths)),
                         "mark_tests": tests}
    spread = max(medians) / min(medians)
    checks["scaled_median_ratio"] = Check(spread < 2.0, spread, 2.0,
                                          "max/min median N^(3/4) sup|X-X~|/a^(1/4)")
    bonf = alpha / len(pvals)
    checks["mark_dispersion"] = Check(min(pvals) >= bonf, min(pvals), bonf,
                                      "smallest Poisson p-value, Bonferroni")
    return ({"deviation": dev_rows, "variance": var_rows, "occupancy": occ_rows},
            {"per_N": per_n, "median_ratio": spread}, checks)


def _mode_diffusion(cfg, batches):
    tol = float(cfg.opt("variance_tol", 0.15))
    var_n = int(cfg.opt("variance_n", cfg.n_list[len(cfg.n_list) // 2]))
    ks_n = int(cfg.opt("ks_n", cfg.n_list[-1]))
    alpha = float(cfg.opt("ks_level", 0.01))
    dev_rows, var_rows, per_n, checks = [], [], {}, {}
    skews = []
    for j, N in enumerate(cfg.n_list):
        p = _params(cfg, N)
        c0 = _counts0(cfg.initial_state, p)
        fl = fluid_solve(p, c0 / N, dt=cfg.dt)
        cov = covariance_solve(fl, p)
        m, t0 = p.m, cfg.t0
        paths = batches.run(f"N{N}", _tail_worker, (p, c0, None, [t0], None, False),
                            cfg.replicas)
        X = np.array([s.fractions[-1] for s in paths])
        Z = math.sqrt(N) * (X - fl.at(t0))
        G = simulate_gamma(fl, p, rng=RngStream(cfg.base_seed, 2 + j),
                           n_replicas=cfg.replicas, obs_times=[t0]).gamma[-1]
        levels = []
        for k in range(1, m):
            ks, pv = ks_two_sample(Z[:, k - 1], G[:, k - 1])
            q05, med, q95 = _quantiles(np.abs(Z[:, k - 1]))
            dev_rows.append({"mode": "diffusion", "N": N, "level": k, "quantile05": q05,
                             "median": med, "quantile95": q95, "n_replicas": len(paths)})
            var_rows.append({"mode": "diffusion", "N": N, "level": k, "t": t0,
                             "var_empirical": float(Z[:, k - 1].var(ddof=1)),
                             "var_ode": float(cov.V[-1, k - 1, k - 1])})
            levels.append({"level": k, "skew": float(skew(Z[:, k - 1])), "ks": ks,
                           "ks_p": pv, "var_gaussian": float(G[:, k - 1].var(ddof=1))})
        skews.append(abs(levels[0]["skew"]))
        ratio = float(Z[:, 0].var(ddof=1)) / float(cov.V[-1, 0, 0])
        per_n[str(N)] = {"m": m, "k_max": p.k_max, "variance_ratio": ratio, "levels": levels}
        if N == var_n:
            checks[f"N{N}_variance"] = Check(abs(ratio - 1) <= tol, ratio, [1 - tol, 1 + tol],
                                             "Var(sqrt(N)(X^1-x^1)) / V11(t0)")
        if N == ks_n:
            pv = levels[0]["ks_p"]
            checks[f"N{N}_ks"] = Check(pv >= alpha, pv, alpha, "KS chain vs Gaussian, level 1")
    order = np.argsort(cfg.n_list)
    s_sorted = [skews[i] for i in order]
    dec = all(b < a_ for a_, b in zip(s_sorted, s_sorted[1:]))
    checks["skewness_decreasing"] = Check(dec, s_sorted, None,
                                          "|skewness| of level-1 fluctuation, increasing N")
    return ({"deviation": dev_rows, "variance": var_rows}, {"per_N": per_n}, checks)


def _mode_gt_bound(cfg, batches):
    starts = cfg.opt("starts", ["fixed-point", "empty", "rounded-a"])
    rows = []
    N = cfg.n_list[0]
    for lam in cfg.lam:
        for d in cfg.d:
            p = _params(cfg, N, lam=lam, d=d)
            for st in starts:
                fl = fluid_solve(p, _x0(st, p), dt=cfg.dt)
                cov = covariance_solve(fl, p)
                rep = check_gt_bound(cov, fl, p)
                rows.append({"lambda": lam, "d": d, "start": st, "c0_hat": rep.c0_hat,
                             "skipped": rep.skipped, "moment_ratio": rep.moment_ratio,
                             "min_eig": cov.min_eig})
    finite = all(math.isfinite(r["c0_hat"]) for r in rows)
    worst = max(r["moment_ratio"] for r in rows)
    checks = {
        "c0_finite": Check(finite, max(r["c0_hat"] for r in rows), None, "sup V_kk / gap"),
        "moment_bound": Check(worst <= 1.0, worst, 1.0, "max V_kk / moment bound"),
    }
    return {"gt_bound": rows}, {"configs": len(rows)}, checks


def _mode_numerics(cfg, batches):
    N = cfg.n_list[0]
    rows, checks = [], {}
    hs = [2.0**-j for j in range(3, 9)]
    gen = RngStream(cfg.base_seed, 4).generator()
    orders = {}
    for d in cfg.d:
        p = _params(cfg, N, d=d)
        x = p.a * gen.uniform(0.8, 1.0, p.k_max)
        x = np.minimum.accumulate(x)
        y = gen.normal(size=p.k_max) * x * 0.1
        exact = drift_gradient(x, y, p.lam, d)
        errs = []
        for h in hs:
            fd = (drift(x + h * y, p.lam, d) - drift(x - h * y, p.lam, d)) / (2 * h)
            errs.append(float(np.max(np.abs(fd - exact))))
            rows.append({"check": "gradient", "d": d, "h": h, "error": errs[-1]})
        if max(errs) < 1e-13:
            orders[d] = None
            ok = True
        else:
            order = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
            orders[d] = order
            ok = 1.8 <= order <= 2.2
        checks[f"gradient_d{d}"] = Check(ok, orders[d] if orders[d] is not None else max(errs),
                                         [1.8, 2.2], "finite-difference order (exact if None)")
    p = _params(cfg, N)
    fl = fluid_solve(p, _x0(cfg.initial_state, p), dt=cfg.dt)
    cov = covariance_solve(fl, p)
    t = cfg.t0
    Vq = covariance_by_propagator(fl, t, nodes=int(cfg.opt("quadrature_nodes", 64)))
    frob = float(np.linalg.norm(Vq - cov.V[-1]))
    cov_tol = float(cfg.opt("covariance_tol", 1e-6))
    checks["covariance_vs_propagator"] = Check(frob < cov_tol, frob, cov_tol, "Frobenius")
    s, u = 0.25 * t, 0.6 * t
    phi_ts = propagator_solve(fl, s, t).matrix
    phi_tu = propagator_solve(fl, u, t).matrix
    phi_us = propagator_solve(fl, s, u).matrix
    flow = float(np.linalg.norm(phi_ts - phi_tu @ phi_us))
    flow_tol = float(cfg.opt("flow_tol", 1e-8))
    checks["flow_law"] = Check(flow < flow_tol, flow, flow_tol, "Frobenius")
    rows.append({"check": "covariance", "d": p.d, "h": cfg.dt, "error": frob})
    rows.append({"check": "flow_law", "d": p.d, "h": cfg.dt, "error": flow})
    return {"numerics": rows}, {"gradient_orders": {str(k): v for k, v in orders.items()}}, checks


def _hand_examples():
    """Closed forms evaluated independently of the bound module."""
    base = dict(lam=0.5, d=2, t0=1.0, rho=1.0, m=3)
    ex = []
    b = BoundInputs(N=10**4, A=10, r=2, R=3, **base)
    p1, _, p3, _, _ = bounds_pp(b)
    ex += [("p1", p1, 10**2 * 2**2 * 1 / 10**4), ("p3", p3, 1 / (2 - 1))]
    p5, _, _ = bounds_qq(b)
    ex.append(("p5", p5, 8 * 2 * math.exp(20) / 4))
    b = BoundInputs(N=10**4, A=100, r=2, R=3, R_bar=10, C=1.0, **base)
    _, p8, _ = bounds_rr(b)
    ex.append(("p8", p8, 3 * (0.01 + (10 * math.log(100)) ** -2)))
    r1 = float(theorem_schedules(10**6, 0.9, 2).thm1["r"])
    ex.append(("thm1_r", r1, 10**1.5 / math.log(10**6) ** 4))
    return ex


def _monotonicity(gen, n_pairs):
    """Sample parameter pairs and check the direction of each bound."""
    fails = []

    def rand_inputs():
        return dict(N=int(10 ** gen.uniform(2, 12)), lam=0.5, d=int(gen.integers(2, 5)),
                    t0=float(gen.uniform(0.05, 2)), rho=float(gen.uniform(1, 3)),
                    A=float(gen.uniform(8, 1e3)), r=float(gen.uniform(3.5, 50)),
                    R=float(gen.uniform(1, 20)), m=int(gen.integers(1, 8)),
                    R_tilde=float(gen.uniform(0.5, 50)), R_bar=float(gen.uniform(0.5, 50)))

    def val(name, kw):
        b = BoundInputs(**kw)
        p1, p2, p3, p4, _ = bounds_pp(b)
        p5, p6, _ = bounds_qq(b)
        p7, p8, _ = bounds_rr(b)
        return dict(p1=p1, p2=p2, p3=p3, p4=p4, p5=p5, p6=p6, p7=p7, p8=p8)[name]

    # (bound, parameter, +1 increasing / -1 decreasing)
    table = [("p1", "A", 1), ("p1", "r", 1), ("p1", "t0", 1), ("p1", "N", -1),
             ("p2", "A", 1), ("p2", "R", 1), ("p2", "t0", 1), ("p2", "N", -1),
             ("p3", "r", -1), ("p3", "t0", 1), ("p3", "rho", 1),
             ("p4", "R", -1), ("p4", "t0", 1), ("p4", "m", 1),
             ("p5", "r", -1), ("p5", "t0", 1), ("p5", "rho", 1),
             ("p6", "R_tilde", -1), ("p6", "R", 1), ("p6", "m", 1),
             ("p7", "r", -1), ("p8", "R_bar", -1), ("p8", "A", -1), ("p8", "m", 1)]
    checked = 0
    for name, key, sign in table:
        for _ in range(n_pairs):
            kw = rand_inputs()
            lo = dict(kw)
            hi = dict(kw)
            if key in ("N", "m"):
                hi[key] = kw[key] * 2
            else:
                hi[key] = kw[key] * float(gen.uniform(1.01, 2.0))
            if key == "rho" and hi["rho"] >= hi["r"]:
                continue
            v0, v1 = val(name, lo), val(name, hi)
            checked += 1
            ok = (v1 >= v0) if sign > 0 else (v1 <= v0)
            if not ok:
                fails.append({"bound": name, "param": key, "low": v0, "high": v1})
    return checked, fails


def _audit_case(cfg, batches, case, idx):
    """Monte Carlo stopping frequencies for one point of the audit matrix."""
    kind = case["kind"]
    N = int(case["N"])
    lam = float(case.get("lambda", cfg.lam0))
    d = int(case.get("d", cfg.d0))
    t0 = float(case["t0"])
    A = float(case["A"])
    p = ModelParams(lam=lam, d=d, n_servers=N, t0=t0, rho=cfg.rho, threshold=A,
                    k_max=case.get("k_max"))
    m = p.m
    r, R = float(case["r"]), float(case["R"])
    inp = BoundInputs(N=N, lam=lam, d=d, t0=t0, rho=cfg.rho, A=A, r=r, R=R, m=m,
                      R_tilde=case.get("R_tilde"), R_bar=case.get("R_bar"),
                      C=float(case.get("C", 1.0)))
    report = bound_report(inp)
    c0 = _counts0(case.get("initial_state", "rounded-a-truncated"), p)
    fl = fluid_solve(p, c0 / N, dt=cfg.dt)
    n_rep = int(case.get("replicas", cfg.replicas))
    firsts, observed = [], set()
    if kind == "cutoff":
        paths = batches.run(f"audit{idx}", _cutoff_worker, (p, fl, c0, r, R), n_rep, 10 + idx)
        sts = [detect_stopping_times(t0, p.a, m, N, cutoff=c) for c in paths]
        observed = {"T1", "T2", "T3", "T4"}
    elif kind == "jump":
        Rt = case.get("R_tilde")
        paths = batches.run(f"audit{idx}", _jump_worker, (p, fl, c0, R, Rt, r), n_rep, 10 + idx)
        sts = [detect_stopping_times(t0, p.a, m, N, jump=q) for q in paths]
        observed = {"T1", "T4", "T5", "T6"}
    else:
        raise ConfigError(f"unknown audit case kind {kind!r}")
    firsts = [s.first for s in sts]
    n = len(firsts)
    freqs = {f"p{i}": (sum(f == f"T{i}" for f in firsts), n)
             for i in range(1, 9) if f"T{i}" in observed}
    if case.get("gaussian", False):
        G = simulate_gamma(fl, p, rng=RngStream(cfg.base_seed, 40 + idx), n_replicas=n_rep,
                           obs_times=None)
        hits = sum(detect_stopping_times(t0, p.a, m, N, gaussian=G, r=r, replica=j).times["T7"]
                   is not None for j in range(n_rep))
        freqs["p7"] = (hits, n_rep)
    audit = bound_vs_frequency(report, freqs)
    sweep = []
    for C in case.get("C_sweep", []):
        rep_c = bound_report(BoundInputs(**{**inp.__dict__, "C": float(C)}))
        aud_c = bound_vs_frequency(rep_c, freqs)
        sweep += [{"case": idx, "C": C, "bound": k, "value": aud_c[k]["bound"],
                   "verdict": aud_c[k]["verdict"]} for k in ("p7", "p8")]
    return report, audit, sweep, {"m": m, "replicas": n}


def _mode_bounds_audit(cfg, batches):
    checks = {}
    ex = _hand_examples()
    rel = max(abs(v - w) / abs(w) for _, v, w in ex)
    checks["hand_examples"] = Check(rel <= 1e-12, rel, 1e-12, "max relative error")
    gen = RngStream(cfg.base_seed, 5).generator()
    n_checked, fails = _monotonicity(gen, int(cfg.opt("monotonicity_pairs", 50)))
    checks["monotonicity"] = Check(not fails, len(fails), 0, f"{n_checked} sampled pairs")
    sched = cfg.opt("schedule", {"lambda": cfg.lam0, "d": cfg.d0, "t0": 1.0})
    n_star = first_n_satisfying_pp(float(sched["lambda"]), int(sched["d"]), float(sched["t0"]),
                                   cfg.rho)
    audit_rows, sweep_rows, reports = [], [], []
    for idx, case in enumerate(cfg.opt("cases", [])):
        report, audit, sweep, info = _audit_case(cfg, batches, case, idx)
        reports.append({"case": idx, **info, "report": json.loads(report.to_json())})
        sweep_rows += sweep
        for name, entry in audit.items():
            row = {"case": idx, "kind": case["kind"], "N": int(case["N"]), "bound": name,
                   "value": entry["bound"], "verdict": entry["verdict"]}
            if "ci" in entry:
                row["ci_low"], row["ci_high"] = entry["ci"]
            row["frequency"] = entry.get("frequency")
            audit_rows.append(row)
    violations = [r for r in audit_rows if r["verdict"] == "VIOLATION"]
    checks["no_violation"] = Check(not violations, len(violations), 0,
                                   f"{len(audit_rows)} bound/frequency pairs")
    results = {
        "hand_examples": [{"name": n, "value": v, "expected": w} for n, v, w in ex],
        "monotonicity_failures": fails,
        "schedule_first_N_log2": None if n_star is None else n_star.bit_length() - 1,
        "schedule": sched,
        "cases": reports,
    }
    return {"audit": audit_rows, "c_sweep": sweep_rows}, results, checks


_PIPELINES = {
    "fixed-point": _mode_fixed_point, "fluid": _mode_fluid, "equivalence": _mode_equivalence,
    "lln": _mode_lln, "cutoff": _mode_cutoff, "jump": _mode_jump,
    "diffusion": _mode_diffusion, "gt-bound": _mode_gt_bound,
    "bounds-audit": _mode_bounds_audit, "numerics": _mode_numerics,
}


# --- bundles ----------------------------------------------------------------

def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    return v


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(_plain(v))


def _write_csv(path, rows, columns=None):
    columns = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


@dataclass
class ResultBundle:
    path: Path
    summary: dict
    tables: dict

    @property
    def passed(self) -> bool:
        enabled = self.summary.get("checks", {})
        return bool(self.summary.get("complete", False)) and all(
            c["passed"] for c in enabled.values())

    @classmethod
    def load(cls, path) -> "ResultBundle":
        path = Path(path)
        summary = json.loads((path / "summary.json").read_text())
        tables = {}
        for name in summary.get("tables", []):
            with open(path / f"{name}.csv", newline="") as fh:
                tables[name] = list(csv.DictReader(fh))
        return cls(path=path, summary=summary, tables=tables)


def compile_kernels() -> float:
    """Trigger JIT compilation of every simulation kernel on a tiny model.

    Compiled code is cached on disk, so only the first call after install
    is slow.  Returns the elapsed seconds.
    """
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = ModelParams(lam=0.5, d=2, n_servers=50, t0=0.05, k_max=6, threshold=2.0)
        c0 = rounded_scales(p, truncate_at=p.m - 1)
        fl = fluid_solve(p, c0 / p.n_servers, check=False)
        simulate_tail(p, c0, rng=0, fluid=fl, record_events=True)
        simulate_queues(p, lengths_from_counts(c0, p.n_servers), rng=0)
        simulate_jump_coupling(p, fl, c0, rng=0, record_marks=True)
        simulate_cutoff_coupling(p, fl, c0, rng=0)
    return time.perf_counter() - start


def resolve_output_dir(cfg: ExperimentConfig, output_dir=None) -> Path:
    if output_dir is not None:
        return Path(output_dir)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) / cfg.name if env else Path(cfg.output_dir)


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> ResultBundle:
    """Run the pipeline of ``cfg.mode`` and write the bundle.

    ``output_dir`` overrides the config; otherwise ``$SUPERMARKET_OUTPUT_DIR/<name>``
    when that variable is set, else the config's ``output_dir``.
    """
    out = resolve_output_dir(cfg, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    batches = _Batches(cfg)
    start = time.perf_counter()
    with warnings.catch_warnings():
        _quiet_scales()
        tables, results, checks = _PIPELINES[cfg.mode](cfg, batches)
    elapsed = time.perf_counter() - start
    if cfg.checks is not None:
        unknown = set(cfg.checks) - set(checks)
        if unknown:
            raise ConfigError(f"unknown checks enabled: {sorted(unknown)}")
        checks = {k: v for k, v in checks.items() if k in cfg.checks}
    failed = len(batches.failures)
    complete = batches.attempted == 0 or failed <= FAILURE_LIMIT * batches.attempted
    summary = _plain({
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "config": cfg.echo(),
        "seeds": {"rule": "base_seed XOR replica_index", "base_seed": cfg.base_seed,
                  "replicas_attempted": batches.attempted},
        "complete": complete,
        "failures": batches.failures,
        "results": results,
        "checks": {k: c.as_dict() for k, c in checks.items()},
        "all_passed": complete and all(c.passed for c in checks.values()),
        "tables": sorted(tables),
    })
    for name, rows in tables.items():
        _write_csv(out / f"{name}.csv", rows, PLOT_COLUMNS.get(name))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps({"seconds": elapsed}) + "\n")
    return ResultBundle(path=out, summary=summary,
                        tables={k: [{c: _cell(v) for c, v in r.items()} for r in rows]
                                for k, rows in tables.items()})


def emit_plotdata(bundle: ResultBundle, out_dir=None) -> dict:
    """Write tidy plotting CSVs with fixed columns; absent tables give
    header-only files."""
    out = Path(out_dir) if out_dir is not None else bundle.path / "plotdata"
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, cols in PLOT_COLUMNS.items():
        rows = bundle.tables.get(name, [])
        target = out / f"{name}.csv"
        _write_csv(target, rows, cols)
        paths[name] = target
    return paths
