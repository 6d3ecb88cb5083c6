"""Small statistical helpers shared by the tests and the harness."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats


def ks_two_sample(sample_a, sample_b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.

    When both samples are constant the test degenerates; the statistic is then
    0 (p = 1) if the constants agree and 1 (p = 0) otherwise.
    """
    a = np.asarray(sample_a, dtype=float).ravel()
    b = np.asarray(sample_b, dtype=float).ravel()
    if min(a.size, b.size) < 50:
        raise ValueError("KS comparison needs at least 50 observations per sample")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        same = a[0] == b[0]
        return (0.0, 1.0) if same else (1.0, 0.0)
    res = stats.ks_2samp(a, b, method="asymp")
    return float(res.statistic), float(res.pvalue)


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    if trials == 0:
        return 0.0, 1.0
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(
        confidence_level=confidence, method="wilson"
    )
    return float(ci.low), float(ci.high)


def mean_ci(values, z: float = 3.0) -> tuple[float, float, float]:
    """Sample mean with a ``z`` standard-error band."""
    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size))
    return m, m - z * se, m + z * se


def poisson_dispersion_test(counts, mean: float) -> dict:
    """Check that replicate counts look Poisson with the given mean.

    Returns the two-sided p-values of the mean (normal approximation to the
    sum, which is Poisson) and of the dispersion index
    ``sum (c - mean)^2 / mean``, chi-square with ``n`` degrees of freedom
    under the null.
    """
    c = np.asarray(counts, dtype=float)
    n = c.size
    total = c.sum()
    if mean <= 0:
        ok = bool(total == 0)
        return {"p_mean": 1.0 if ok else 0.0, "p_dispersion": 1.0 if ok else 0.0}
    p_mean = 2 * min(stats.poisson.cdf(total, n * mean), stats.poisson.sf(total - 1, n * mean))
    disp = float(((c - mean) ** 2).sum() / mean)
    p_disp = 2 * min(stats.chi2.cdf(disp, n), stats.chi2.sf(disp, n))
    return {"p_mean": float(min(p_mean, 1.0)), "p_dispersion": float(min(p_disp, 1.0)),
            "dispersion": disp / n}
