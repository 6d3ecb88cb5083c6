"""Model quantities for the supermarket (power-of-d-choices) system.

Levels are 1-based in the mathematics and 0-based in arrays: ``x[k - 1]``
holds the fraction of queues with at least ``k`` customers.  Every vector is
truncated at ``k_max`` with the boundary conventions ``x^0 = 1`` and
``x^{k_max + 1} = 0``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

_TINY = np.finfo(float).tiny


class TruncationError(RuntimeError):
    """Raised when ``k_max`` is too small for the requested operation."""


@dataclass(frozen=True)
class ModelParams:
    """Fixed constants of one supermarket model instance.

    ``threshold`` is the cutoff threshold A used to pick the cutoff level;
    ``None`` means the asymptotic default ``(log N)^4``.  ``k_max=None``
    resolves to ``m + 3`` where ``m`` is the cutoff level.
    """

    lam: float
    d: int
    n_servers: int
    t0: float = 1.0
    rho: float = 1.0
    k_max: int | None = None
    threshold: float | None = None

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lam must lie in (0, 1), got {self.lam}")
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"d must be an integer >= 2, got {self.d}")
        if int(self.n_servers) != self.n_servers or self.n_servers < 1:
            raise ValueError(f"n_servers must be a positive integer, got {self.n_servers}")
        if not self.t0 > 0:
            raise ValueError(f"t0 must be positive, got {self.t0}")
        if not self.rho >= 1:
            raise ValueError(f"rho must be >= 1, got {self.rho}")
        if self.threshold is not None and not self.threshold >= 1:
            raise ValueError(f"threshold must be >= 1, got {self.threshold}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "n_servers", int(self.n_servers))
        if self.k_max is None:
            m = _scan_cutoff(self.lam, self.d, self.n_servers, self.cutoff_threshold)
            object.__setattr__(self, "k_max", max(m + 3, 3))
        elif int(self.k_max) != self.k_max or self.k_max < 3:
            raise ValueError(f"k_max must be an integer >= 3, got {self.k_max}")
        object.__setattr__(self, "k_max", int(self.k_max))

    @property
    def cutoff_threshold(self) -> float:
        if self.threshold is None:
            return default_threshold(self.n_servers)
        return float(self.threshold)

    @cached_property
    def scales(self) -> "ScaleVector":
        return scale_sequence(self)

    @property
    def a(self) -> np.ndarray:
        return self.scales.a

    @cached_property
    def m(self) -> int:
        return cutoff_level(self.n_servers, self.a, self.cutoff_threshold)


@dataclass(frozen=True)
class ScaleVector:
    """Natural magnitudes ``a_1..a_{k_max}`` of the tail fractions.

    ``underflow`` marks entries below the smallest normal double; they are
    stored as 0 and excluded from scaled norms.
    """

    a: np.ndarray
    log_a: np.ndarray
    underflow: np.ndarray

    def __len__(self):
        return len(self.a)

    def __array__(self, dtype=None, copy=None):
        return self.a if dtype is None else self.a.astype(dtype)


@dataclass(frozen=True)
class DerivedConstants:
    sigma: float
    L: float
    H: float
    alpha: float
    m: int


def log_scales(lam: float, d: int, k_max: int) -> np.ndarray:
    """``log a_k`` for k = 1..k_max, exponent (d^k - 1)/(d - 1) in closed form."""
    k = np.arange(1, k_max + 1, dtype=float)
    exponent = (float(d) ** k - 1.0) / (d - 1.0)
    return exponent * math.log(lam)


def scale_sequence(params: ModelParams) -> ScaleVector:
    log_a = log_scales(params.lam, params.d, params.k_max)
    with np.errstate(under="ignore"):
        a = np.exp(log_a)
    underflow = a < _TINY
    a[underflow] = 0.0
    if underflow.any():
        warnings.warn(
            f"a_k underflows for levels {np.flatnonzero(underflow) + 1}; clamped to 0",
            RuntimeWarning,
            stacklevel=2,
        )
    return ScaleVector(a=a, log_a=log_a, underflow=underflow)


def default_threshold(n_servers: int) -> float:
    """The asymptotic cutoff threshold ``(log N)^4``, floored at 1."""
    return max(math.log(n_servers) ** 4, 1.0)


def _scan_cutoff(lam, d, n_servers, threshold):
    log_target = math.log(threshold) - math.log(n_servers)
    k = 1
    while True:
        if ((float(d) ** k - 1.0) / (d - 1.0)) * math.log(lam) <= log_target:
            return k
        k += 1


def cutoff_level(n_servers: int, a, threshold: float) -> int:
    """Smallest level ``k`` with ``N a_k <= A``.

    Raises TruncationError if no level up to ``len(a)`` qualifies.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    a = np.asarray(a, dtype=float)
    hits = np.flatnonzero(n_servers * a <= threshold)
    if hits.size == 0:
        raise TruncationError(
            f"no level k <= {len(a)} has N a_k <= {threshold}; increase k_max"
        )
    return int(hits[0]) + 1


def derived_constants(params: ModelParams) -> DerivedConstants:
    d, lam, n = params.d, params.lam, params.n_servers
    sigma = params.rho + 1.0
    L = 2.0 * (d * sigma ** (d - 1) + 1.0)
    H = 0.5 * d * (d - 1) * sigma ** (d - 2)
    if n > 1 and math.log(n) > 0:
        alpha = (math.log(math.log(n)) - math.log(math.log(1.0 / lam))) / math.log(d)
    else:
        alpha = float("-inf")
    return DerivedConstants(sigma=sigma, L=L, H=H, alpha=alpha, m=params.m)


def _pad(x):
    # positive parts with virtual boundaries x^0 = 1, x^{k_max+1} = 0
    y = np.maximum(np.asarray(x, dtype=float), 0.0)
    edge = y.shape[:-1] + (1,)
    return np.concatenate((np.ones(edge), y, np.zeros(edge)), axis=-1)


def rates(x, lam: float, d: int) -> tuple[np.ndarray, np.ndarray]:
    """All level rates ``(lambda_+^k(x), lambda_-^k(x))`` for k = 1..k_max.

    Uses the positive-part extension, so the result is nonnegative for any
    real input.  Leading axes of ``x`` are broadcast over.
    """
    y = _pad(x)
    yd = y**d
    plus = lam * np.maximum(yd[..., :-2] - yd[..., 1:-1], 0.0)
    minus = np.maximum(y[..., 1:-1] - y[..., 2:], 0.0)
    return plus, minus


def _check_level(k, x):
    if not 1 <= k <= len(x):
        raise IndexError(f"level {k} outside 1..{len(x)}")


def rate_plus(x, k: int, lam: float, d: int) -> float:
    _check_level(k, x)
    return float(rates(x, lam, d)[0][k - 1])


def rate_minus(x, k: int, lam: float, d: int) -> float:
    _check_level(k, x)
    return float(rates(x, lam, d)[1][k - 1])


def drift(x, lam: float, d: int) -> np.ndarray:
    plus, minus = rates(x, lam, d)
    return plus - minus


def drift_jacobian(x, lam: float, d: int) -> np.ndarray:
    """Tridiagonal matrix of the linearised drift at ``x`` in S_0."""
    x = np.asarray(x, dtype=float)
    K = len(x)
    slope = lam * d * x ** (d - 1)
    J = np.zeros((K, K))
    idx = np.arange(K)
    J[idx, idx] = -slope - 1.0
    J[idx[1:], idx[:-1]] = slope[:-1]
    J[idx[:-1], idx[1:]] = 1.0
    return J


def drift_gradient(x, y, lam: float, d: int) -> np.ndarray:
    """Directional derivative of the drift at ``x`` along ``y``.

    ``y^0`` and ``y^{k_max+1}`` are taken to be 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope = lam * d * x ** (d - 1)
    out = -(slope + 1.0) * y
    out[1:] += slope[:-1] * y[:-1]
    out[:-1] += y[1:]
    return out


def scaled_ratios(x, a) -> np.ndarray:
    """``|x^k| / a_k`` with underflowed levels (``a_k == 0``) dropped."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    keep = a > 0
    return np.abs(x[..., keep]) / a[keep]


def scaled_norm(x, a) -> float:
    r = scaled_ratios(x, a)
    return float(r.max()) if r.size else 0.0


def in_s0(x, atol: float = 0.0) -> bool:
    x = np.asarray(x, dtype=float)
    if np.any(x < -atol) or np.any(x > 1 + atol):
        return False
    return bool(np.all(np.diff(x) <= atol))


def in_envelope(path, rho: float, rtol: float = 1e-9) -> bool:
    """True iff the scaled norm stays below ``rho`` at every grid time.

    ``rtol`` absorbs rounding in ``a`` itself (a path started at ``a`` has
    norm 1 only to within a few ulps).
    """
    ratios = scaled_ratios(path.states, path.a)
    return bool(np.all(ratios <= rho * (1.0 + rtol)))


def rounded_scales(params: ModelParams, truncate_at: int | None = None) -> np.ndarray:
    """Counts ``n_k = floor(N a_k)``, repaired to be non-increasing.

    ``truncate_at=j`` keeps levels ``1..j`` and zeroes every level above.
    """
    n = np.floor(params.n_servers * params.a).astype(np.int64)
    n = np.minimum.accumulate(np.clip(n, 0, params.n_servers))
    if truncate_at is not None:
        n[truncate_at:] = 0
    return n


def check_counts(counts, n_servers: int) -> np.ndarray:
    c = np.asarray(counts)
    if c.ndim != 1 or not np.issubdtype(c.dtype, np.integer):
        raise ValueError("counts must be a 1-d integer vector")
    if np.any(c < 0) or np.any(c > n_servers) or np.any(np.diff(c) > 0):
        raise ValueError("counts must be non-increasing within [0, N]")
    return c.astype(np.int64)
