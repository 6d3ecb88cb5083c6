"""Gaussian fluctuation field: simulation, exact covariance and bounds."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .couplings import _simpson, moment_bound
from .ctmc import as_stream
from .fluid import FluidPath, NonConvergenceWarning, _grid, propagator_solve
from .model import ModelParams, drift_jacobian, rates
from .stats import ks_two_sample


def sigma_pm(x, k: int, lam: float, d: int) -> tuple[float, float]:
    """Square roots of the level-k kernel rates."""
    plus, minus = rates(x, lam, d)
    return math.sqrt(plus[k - 1]), math.sqrt(minus[k - 1])


@dataclass
class GaussianPath:
    """Replicated Euler-Maruyama paths; ``gamma`` has shape (times, replicas, K)."""

    times: np.ndarray
    gamma: np.ndarray
    sup_abs: np.ndarray
    dt: float
    increments: np.ndarray | None = None

    def to_csv(self, path, replica: int = 0) -> None:
        K = self.gamma.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"gamma{k}" for k in range(1, K + 1)])
            for t, row in zip(self.times, self.gamma[:, replica]):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def simulate_gamma(
    fluid: FluidPath,
    params: ModelParams,
    dt: float | None = None,
    rng=0,
    n_replicas: int = 1,
    obs_times=None,
    noise_scale: float = 1.0,
    keep_increments: bool = False,
) -> GaussianPath:
    """Euler-Maruyama for the linear SDE driven by the fluid rates.

    Per step ``h``: ``g += J(x_t) g h + sqrt(lam_+(x_t) h) xi_+ - sqrt(lam_-(x_t) h) xi_-``
    with independent standard normals per level and sign.  Coefficients are
    evaluated on the deterministic path only.  ``obs_times`` are rounded to
    the nearest grid point; ``sup_abs`` is the grid supremum of ``|g|`` per
    replica and level.
    """
    t0 = params.t0
    n, h = _grid(t0, t0 / 2048 if dt is None else dt)
    K = params.k_max
    grid = np.linspace(0.0, t0, n + 1)
    obs_idx = (np.arange(n + 1) if obs_times is None
               else np.rint(np.asarray(obs_times, float) / h).astype(int))
    xs = fluid.at(grid[:-1])
    gen = as_stream(rng).generator()
    g = np.zeros((n_replicas, K))
    sup_abs = np.zeros((n_replicas, K))
    out = np.zeros((len(obs_idx), n_replicas, K))
    incs = np.empty((n, 2, n_replicas, K)) if keep_increments else None
    slot = {int(i): j for j, i in enumerate(obs_idx)}
    sqrt_h = math.sqrt(h)
    for i in range(n):
        x = xs[i]
        plus, minus = rates(x, params.lam, params.d)
        J = drift_jacobian(x, params.lam, params.d)
        xi = gen.standard_normal((2, n_replicas, K)) * noise_scale
        if keep_increments:
            incs[i] = xi
        g = g + h * g @ J.T + sqrt_h * (np.sqrt(plus) * xi[0] - np.sqrt(minus) * xi[1])
        np.maximum(sup_abs, np.abs(g), out=sup_abs)
        if i + 1 in slot:
            out[slot[i + 1]] = g
    return GaussianPath(times=grid[obs_idx], gamma=out, sup_abs=sup_abs, dt=h,
                        increments=incs)


@dataclass
class CovarianceCurve:
    times: np.ndarray
    V: np.ndarray
    min_eig: float
    halving_error: float = 0.0

    def diag(self) -> np.ndarray:
        return np.diagonal(self.V, axis1=1, axis2=2)

    def to_csv(self, path) -> None:
        K = self.V.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"V{k}{k}" for k in range(1, K + 1)])
            for t, row in zip(self.times, self.diag()):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    def save_full(self, path) -> None:
        np.savez(path, times=self.times, V=self.V)


def _lyapunov_rk4(fluid, h, n, jacobian):
    K = fluid.k_max
    lam, d = fluid.lam, fluid.d

    def rhs(x, V):
        p, q = rates(x, lam, d)
        D = np.diag(p + q)
        if not jacobian:
            return D
        J = drift_jacobian(x, lam, d)
        return J @ V + V @ J.T + D

    V = np.zeros((K, K))
    out = np.zeros((n + 1, K, K))
    min_eig = 0.0
    for i in range(n):
        t = i * h
        x0, xm, x1 = fluid.at(np.array([t, t + 0.5 * h, t + h]))
        k1 = rhs(x0, V)
        k2 = rhs(xm, V + 0.5 * h * k1)
        k3 = rhs(xm, V + 0.5 * h * k2)
        k4 = rhs(x1, V + h * k3)
        V = V + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        V = 0.5 * (V + V.T)
        min_eig = min(min_eig, float(np.linalg.eigvalsh(V)[0]))
        out[i + 1] = V
    return out, min_eig


def covariance_solve(fluid: FluidPath, params: ModelParams | None = None,
                     dt: float | None = None, jacobian: bool = True,
                     tol: float = 1e-8) -> CovarianceCurve:
    """Covariance of the Gaussian field from its Lyapunov ODE.

    ``V' = J V + V J^T + diag(lam_+ + lam_-)`` along the fluid path, RK4
    on the fluid grid (or step ``dt``), symmetrised every step.  A
    step-halving disagreement above ``tol``, in units of ``sqrt(a_k a_j)``,
    warns; eigenvalues below
    ``-1e-10`` warn as loss of positive semidefiniteness.
    ``jacobian=False`` drops the linear terms (integrated variance only).
    """
    t_end = fluid.t_end if params is None else params.t0
    n, h = _grid(t_end, fluid.dt if dt is None else dt)
    V, min_eig = _lyapunov_rk4(fluid, h, n, jacobian)
    fine, _ = _lyapunov_rk4(fluid, h / 2, 2 * n, jacobian)
    a = fluid.a
    keep = a > 0
    scale = np.outer(np.sqrt(a[keep]), np.sqrt(a[keep]))
    err = float(np.max(np.abs(fine[::2] - V)[:, keep][:, :, keep] / scale))
    if err > tol:
        warnings.warn(f"covariance step-halving disagreement {err:.3g}",
                      NonConvergenceWarning, stacklevel=2)
    if min_eig < -1e-10:
        warnings.warn(f"covariance lost positive semidefiniteness ({min_eig:.3g})",
                      RuntimeWarning, stacklevel=2)
    return CovarianceCurve(times=np.linspace(0.0, t_end, n + 1), V=V,
                           min_eig=min_eig, halving_error=err)


def covariance_by_propagator(fluid: FluidPath, t: float, nodes: int = 64) -> np.ndarray:
    """``int_0^t Phi_{t,s} D(s) Phi_{t,s}^T ds`` by Simpson's rule."""
    ss = np.linspace(0.0, t, nodes + 1)
    vals = []
    for s in ss:
        phi = propagator_solve(fluid, float(s), t).matrix
        p, q = rates(fluid.at(s), fluid.lam, fluid.d)
        vals.append(phi @ np.diag(p + q) @ phi.T)
    return _simpson(np.array(vals), t / nodes)


def gap(x) -> np.ndarray:
    """``min(x^{k-1} - x^k, x^k - x^{k+1})`` per level, boundary x^0 = 1."""
    x = np.asarray(x, dtype=float)
    pad = np.concatenate(([1.0], x, [0.0]))
    return np.minimum(pad[:-2] - pad[1:-1], pad[1:-1] - pad[2:])


@dataclass
class GTReport:
    c0_hat: float
    ratios: np.ndarray
    skipped: int
    moment_ratio: float
    moment_ok: bool


def check_gt_bound(cov: CovarianceCurve, fluid: FluidPath, params: ModelParams,
                   floor: float = 1e-14) -> GTReport:
    """Estimate ``sup_{k,t} V_kk(t) / gap_k(x_t)`` and check the moment bound.

    Grid points whose gap is at most ``floor`` are skipped and counted.
    ``moment_ratio`` is the largest ``V_kk(t)`` over the moment bound, taken
    over levels with a representable scale.
    """
    x = fluid.at(cov.times)
    den = np.array([gap(row) for row in x])
    diag = cov.diag()
    ok = den > floor
    ratios = np.where(ok, diag / np.where(ok, den, 1.0), np.nan)
    bound = moment_bound(params)
    keep = bound > 0
    moment_ratio = float(np.max(diag[:, keep] / bound[keep]))
    return GTReport(
        c0_hat=float(np.nanmax(ratios)),
        ratios=ratios,
        skipped=int((~ok).sum()),
        moment_ratio=moment_ratio,
        moment_ok=moment_ratio <= 1.0,
    )


@dataclass
class FluctuationRow:
    level: int
    t: float
    mean: float
    var: float
    skew: float
    ks_stat: float
    ks_p: float
    var_ode: float | None

    @property
    def var_ratio(self) -> float | None:
        return None if self.var_ode is None else self.var / self.var_ode


def compare_fluctuations(chain_fractions, gaussian, fluid: FluidPath, n_servers: int,
                         times, levels, cov: CovarianceCurve | None = None,
                         min_replicas: int = 500) -> list[FluctuationRow]:
    """Law-level comparison of ``sqrt(N)(X - x)`` with the Gaussian field.

    ``chain_fractions`` has shape (replicas, len(times), K) and ``gaussian``
    shape (replicas', len(times), K), both observed at ``times``.
    """
    X = np.asarray(chain_fractions, float)
    G = np.asarray(gaussian, float)
    if X.shape[0] < min_replicas or G.shape[0] < min_replicas:
        raise ValueError(f"need at least {min_replicas} replicas of each")
    rows = []
    xs = fluid.at(np.asarray(times, float))
    for j, t in enumerate(times):
        for k in levels:
            z = math.sqrt(n_servers) * (X[:, j, k - 1] - xs[j, k - 1])
            ks, p = ks_two_sample(z, G[:, j, k - 1])
            v_ode = None
            if cov is not None:
                i = int(np.argmin(np.abs(cov.times - t)))
                v_ode = float(cov.V[i, k - 1, k - 1])
            rows.append(FluctuationRow(
                level=k, t=float(t), mean=float(z.mean()), var=float(z.var(ddof=1)),
                skew=float(stats.skew(z)), ks_stat=ks, ks_p=p, var_ode=v_ode,
            ))
    return rows
