"""Deterministic limit x' = b(x) and its linearisation along a path."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .model import ModelParams, drift, drift_jacobian, in_s0, scaled_norm, scaled_ratios


class NonConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FluidPath:
    """RK4 trajectory on a uniform grid with cubic Hermite dense output."""

    times: np.ndarray
    states: np.ndarray
    drifts: np.ndarray
    lam: float
    d: int
    a: np.ndarray
    dt: float
    max_projection: float
    converged: bool = True
    halving_error: float = 0.0

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def k_max(self) -> int:
        return self.states.shape[1]

    def at(self, t) -> np.ndarray:
        """State at time(s) ``t`` by cubic Hermite interpolation.

        The stored drifts serve as slopes, so the interpolant is fourth-order
        accurate, matching the integrator.
        """
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if np.any(t < -1e-12) or np.any(t > self.t_end * (1 + 1e-12) + 1e-12):
            raise ValueError("time outside the fluid path")
        n = len(self.times) - 1
        i = np.clip((t / self.dt).astype(int), 0, n - 1)
        s = np.clip((t - self.times[i]) / self.dt, 0.0, 1.0)[:, None]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s**2 * (3 - 2 * s)
        h11 = s**2 * (s - 1)
        out = (
            h00 * self.states[i]
            + h10 * self.dt * self.drifts[i]
            + h01 * self.states[i + 1]
            + h11 * self.dt * self.drifts[i + 1]
        )
        return out[0] if scalar else out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{k}" for k in range(1, self.k_max + 1)])
            for t, x in zip(self.times, self.states):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def _project(x):
    y = np.minimum.accumulate(np.clip(x, 0.0, 1.0))
    return y, float(np.max(np.abs(y - x)))


def _rk4(x0, lam, d, dt, n_steps):
    return _kernels.fluid_rk4(np.ascontiguousarray(x0, dtype=float), float(lam), int(d),
                              float(dt), int(n_steps))


def _grid(t_end, dt):
    n = max(1, int(math.ceil(t_end / dt - 1e-9)))
    return n, t_end / n


def fluid_solve(
    params: ModelParams,
    x0,
    dt: float = 2.0**-8,
    t_end: float | None = None,
    tol: float = 1e-8,
    check: bool = True,
) -> FluidPath:
    """Integrate the fluid limit from ``x0`` with classical RK4.

    The grid is uniform with the largest step not exceeding ``dt`` that
    divides ``t_end`` (default ``params.t0``).  When ``check`` is set the
    solve is repeated at half the step and a scaled disagreement above
    ``tol`` marks the path as not converged.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (params.k_max,):
        raise ValueError(f"x0 must have length k_max={params.k_max}")
    if not in_s0(x0):
        raise ValueError("x0 must be a non-increasing sequence in [0, 1]")
    t_end = params.t0 if t_end is None else float(t_end)
    n, h = _grid(t_end, dt)
    lam, d = params.lam, params.d
    states, proj = _rk4(x0, lam, d, h, n)
    err = 0.0
    if check:
        fine, _ = _rk4(x0, lam, d, h / 2, 2 * n)
        diff = fine[::2] - states
        err = float(scaled_ratios(diff, params.a).max(initial=0.0))
    converged = err <= tol
    if not converged:
        warnings.warn(
            f"fluid step-halving disagreement {err:.3g} exceeds {tol:.1g}",
            NonConvergenceWarning,
            stacklevel=2,
        )
    drifts = drift(states, lam, d)
    return FluidPath(
        times=np.linspace(0.0, t_end, n + 1),
        states=states,
        drifts=drifts,
        lam=lam,
        d=d,
        a=params.a,
        dt=h,
        max_projection=proj,
        converged=converged,
        halving_error=err,
    )


@dataclass(frozen=True)
class Propagator:
    s: float
    t: float
    matrix: np.ndarray


def propagator_solve(path: FluidPath, s: float, t: float) -> Propagator:
    """Solve dPhi/dt = J(x_t) Phi, Phi_{s,s} = I, by RK4 along ``path``."""
    if not 0 <= s <= t <= path.t_end + 1e-12:
        raise ValueError("need 0 <= s <= t <= t_end")
    K = path.k_max
    phi = np.eye(K)
    if t == s:
        return Propagator(s, t, phi)
    n, h = _grid(t - s, path.dt)
    lam, d = path.lam, path.d
    for i in range(n):
        u = s + i * h
        xs = path.at(np.array([u, u + 0.5 * h, u + h]))
        J0, Jm, J1 = (drift_jacobian(x, lam, d) for x in xs)
        k1 = J0 @ phi
        k2 = Jm @ (phi + 0.5 * h * k1)
        k3 = Jm @ (phi + 0.5 * h * k2)
        k4 = J1 @ (phi + h * k3)
        phi = phi + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return Propagator(s, t, phi)


def scaled_operator_norm(matrix, a) -> float:
    """Operator norm induced by ``sup_k |x^k| / a_k``.

    Equals the max row sum of ``|M_kj| a_j / a_k``; underflowed levels are
    dropped as in ``scaled_norm``.
    """
    a = np.asarray(a, dtype=float)
    keep = a > 0
    M = np.abs(np.asarray(matrix)[np.ix_(keep, keep)])
    ak = a[keep]
    return float(np.max((M * ak[None, :]).sum(axis=1) / ak))


def comparison_check(path_a: FluidPath, path_b: FluidPath, slack: float = 1e-10):
    """Check that ``path_a <= path_b`` componentwise at every grid time.

    Returns None (not applicable) when the initial states are not ordered
    that way, otherwise a bool.
    """
    if path_a.states.shape != path_b.states.shape or not np.allclose(
        path_a.times, path_b.times
    ):
        raise ValueError("paths must share a grid")
    if np.any(path_a.states[0] > path_b.states[0]):
        return None
    return bool(np.all(path_a.states <= path_b.states + slack))
