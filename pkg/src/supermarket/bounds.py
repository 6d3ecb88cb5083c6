"""Explicit error-probability bounds p1..p8 and their constraint sets.

Arithmetic runs in mpmath so that ``N`` may be an arbitrarily large Python
int: the asymptotic schedules only meet their constraints at astronomically
large ``N``, where quantities such as ``r`` overflow a double.  Reported
values are converted back to float (possibly ``inf`` or 0).
"""
from __future__ import annotations

import json
import math

import mpmath as mp
from dataclasses import asdict, dataclass, field

from .model import TruncationError, cutoff_level, log_scales
from .stats import wilson_interval

FORMULAS = {
    "p1": "A^d r^d t0 / N^(d-1)",
    "p2": "A^(1-1/(2d)) d sigma^(d-1) R t0 / N^((1/2)(1-1/d))",
    "p3": "rho^d t0 / (r - rho)",
    "p4": "2 m exp(-R^2 / (20 sigma^d t0 exp(2 L t0)))",
    "p5": "8 (rho^d + 1) t0 exp(2 L t0^2) / r^2",
    "p6": "2 m exp(-R_tilde^2 / (20 R L t0 exp(2 L t0)))",
    "p7": "C / r^2",
    "p8": "C m (1/A + (R_bar log A)^-2)",
}


@dataclass(frozen=True)
class BoundInputs:
    N: int
    lam: float
    d: int
    t0: float
    rho: float
    A: float
    r: float
    R: float
    m: int
    R_tilde: float | None = None
    R_bar: float | None = None
    C: float = 1.0

    @property
    def sigma(self) -> float:
        return self.rho + 1.0

    @property
    def L(self) -> float:
        return 2.0 * (self.d * self.sigma ** (self.d - 1) + 1.0)

    @property
    def H(self) -> float:
        return 0.5 * self.d * (self.d - 1) * self.sigma ** (self.d - 2)

    @property
    def log_n(self) -> float:
        return math.log(self.N)

    def m_consistent(self) -> bool:
        """Whether ``m`` is the cutoff level for threshold ``A``."""
        log_a = log_scales(self.lam, self.d, self.m)
        above = all(self.log_n + la > math.log(self.A) for la in log_a[:-1])
        return bool(above and self.log_n + log_a[-1] <= math.log(self.A))


def _mp(p: BoundInputs):
    f = mp.mpf
    return dict(N=f(p.N), d=p.d, t0=f(p.t0), rho=f(p.rho), A=f(p.A), r=f(p.r),
                R=f(p.R), m=p.m, sigma=f(p.sigma), L=f(p.L), H=f(p.H))


def _f(x):
    return None if x is None else float(x)


def _pp_constraints(p: BoundInputs) -> dict:
    q = _mp(p)
    d, N, A, r, R, t0 = q["d"], q["N"], q["A"], q["r"], q["R"], q["t0"]
    lower = 2 * r * A * t0 * mp.exp(q["L"] * t0) / N ** (mp.mpf(1) / 2 * (1 - mp.mpf(1) / d))
    return {
        "A_R_rho_at_least_1": bool(A >= 1 and R >= 1 and q["rho"] >= 1),
        "rho_A^d_le_N^(d-1)": bool(q["rho"] * A**d <= N ** (d - 1)),
        "r_gt_rho": bool(r > q["rho"]),
        "R_lower": bool(lower <= R),
        "R_upper": bool(R <= min(t0, 1) * mp.sqrt(A)),
    }


def bounds_pp(p: BoundInputs):
    """Return ``(p1, p2, p3, p4, constraint_flags)``."""
    q = _mp(p)
    d, N, A, r, R, t0, rho, s = (q[k] for k in ("d", "N", "A", "r", "R", "t0", "rho", "sigma"))
    p1 = A**d * r**d * t0 / N ** (d - 1)
    p2 = (A ** (1 - mp.mpf(1) / (2 * d)) * d * s ** (d - 1) * R * t0
          / N ** (mp.mpf(1) / 2 * (1 - mp.mpf(1) / d)))
    p3 = rho**d * t0 / (r - rho) if r > rho else mp.inf
    p4 = 2 * q["m"] * mp.exp(-R**2 / (20 * s**d * t0 * mp.exp(2 * q["L"] * t0)))
    return _f(p1), _f(p2), _f(p3), _f(p4), _pp_constraints(p)


def bounds_qq(p: BoundInputs):
    """Return ``(p5, p6, constraint_flags)``; flags include those of PP."""
    q = _mp(p)
    d, N, A, r, R, t0, rho, L = (q[k] for k in ("d", "N", "A", "r", "R", "t0", "rho", "L"))
    p5 = 8 * (rho**d + 1) * t0 * mp.exp(2 * L * t0**2) / r**2
    flags = dict(_pp_constraints(p))
    flags["rA_le_N^((1/2)(1-1/d))"] = bool(r * A <= N ** (mp.mpf(1) / 2 * (1 - mp.mpf(1) / d)))
    p6 = None
    if p.R_tilde is None:
        flags["R_tilde_lower"] = flags["R_tilde_upper"] = False
    else:
        Rt = mp.mpf(p.R_tilde)
        e = mp.exp(L * t0)
        p6 = 2 * q["m"] * mp.exp(-Rt**2 / (20 * R * L * t0 * mp.exp(2 * L * t0)))
        lower = (4 * q["H"] * R**2 * t0 * e / N ** mp.mpf(0.25)
                 + 4 * r * A * t0 * e / N ** (mp.mpf(1) / 4 * (1 - mp.mpf(1) / d)))
        flags["R_tilde_lower"] = bool(lower <= Rt)
        flags["R_tilde_upper"] = bool(Rt <= 4 * R * L * t0 * e * A ** mp.mpf(0.25))
    return _f(p5), _f(p6), flags


def bounds_rr(p: BoundInputs, C: float | None = None):
    """Return ``(p7, p8, constraint_flags)`` for the constant ``C``.

    ``C`` exists but is not determined; it defaults to ``p.C``.
    """
    C = mp.mpf(p.C if C is None else C)
    if not C > 0:
        raise ValueError("C must be positive")
    q = _mp(p)
    N, A, r, R = q["N"], q["A"], q["r"], q["R"]
    p7 = C / r**2
    flags = dict(_pp_constraints(p))
    flags["A_ge_e^2"] = bool(A >= mp.e**2)
    flags["R_le_sqrt(A)/2"] = bool(R <= mp.sqrt(A) / 2)
    p8 = None
    if p.R_bar is None:
        flags["R_bar_lower"] = flags["R_bar_upper"] = False
    else:
        Rb = mp.mpf(p.R_bar)
        p8 = C * q["m"] * (1 / A + (Rb * mp.log(A)) ** -2)
        flags["R_bar_lower"] = bool(C + C * (R**2 + r * A) / mp.log(N) <= Rb)
        flags["R_bar_upper"] = bool(Rb <= A / (2 * mp.log(A)))
    return _f(p7), _f(p8), flags


@dataclass
class BoundReport:
    inputs: dict
    p: dict
    constraints: dict
    formulas: dict = field(default_factory=lambda: dict(FORMULAS))

    def total(self, prop: str = "PP") -> float:
        names = {"PP": ["p1", "p2", "p3", "p4"],
                 "QQ": ["p1", "p2", "p3", "p4", "p5", "p6"],
                 "RR": ["p1", "p2", "p3", "p4", "p7", "p8"]}[prop]
        vals = [self.p[n] for n in names]
        if any(v is None for v in vals):
            return 1.0
        return min(1.0, sum(vals))

    def holds(self, prop: str) -> bool:
        return all(self.constraints[prop].values())

    def to_json(self) -> str:
        body = {
            "inputs": self.inputs,
            "p": {k: _json_num(v) for k, v in self.p.items()},
            "constraints": self.constraints,
            "formulas": self.formulas,
            "totals": {k: self.total(k) for k in ("PP", "QQ", "RR")},
        }
        return json.dumps(body, indent=2, sort_keys=True)


def _plain(v):
    if isinstance(v, int) and abs(v) >= 2**63:
        return str(v)
    if isinstance(v, mp.mpf):
        return float(v) if mp.isfinite(v) and abs(v) < 1e300 else mp.nstr(v, 17)
    return v


def _json_num(v):
    if v is None or math.isfinite(v):
        return v
    return "inf"


def bound_report(p: BoundInputs) -> BoundReport:
    p1, p2, p3, p4, f_pp = bounds_pp(p)
    p5, p6, f_qq = bounds_qq(p)
    p7, p8, f_rr = bounds_rr(p)
    inputs = {k: _plain(v) for k, v in asdict(p).items()}
    inputs.update(sigma=p.sigma, L=p.L, H=p.H, m_consistent=p.m_consistent())
    return BoundReport(
        inputs=inputs,
        p=dict(p1=p1, p2=p2, p3=p3, p4=p4, p5=p5, p6=p6, p7=p7, p8=p8),
        constraints={"PP": f_pp, "QQ": f_qq, "RR": f_rr},
    )


PROPOSITION_OF = {"p1": "PP", "p2": "PP", "p3": "PP", "p4": "PP",
                  "p5": "QQ", "p6": "QQ", "p7": "RR", "p8": "RR"}


def bound_vs_frequency(report: BoundReport, frequencies: dict,
                       confidence: float = 0.99) -> dict:
    """Audit each bound against a Monte Carlo stopping frequency.

    ``frequencies`` maps ``"p1"``.. to ``(successes, trials)`` or directly to
    a confidence interval ``{"ci": (low, high)}``.  Verdicts: VACUOUS
    (bound >= 1), SKIPPED (constraints of the proposition fail), UNOBSERVED
    (no estimate), VIOLATION (lower confidence limit above the bound) or
    PASS.
    """
    audit = {}
    for name, prop in PROPOSITION_OF.items():
        bound = report.p.get(name)
        entry = {"bound": _json_num(bound), "proposition": prop}
        est = frequencies.get(name)
        if est is not None:
            if isinstance(est, dict):
                low, high = est["ci"]
            else:
                k, n = est
                low, high = wilson_interval(k, n, confidence)
                entry["frequency"] = k / n if n else None
            entry["ci"] = [low, high]
        if bound is None:
            verdict = "UNOBSERVED"
        elif bound >= 1:
            verdict = "VACUOUS"
        elif not report.holds(prop):
            verdict = "SKIPPED"
        elif est is None:
            verdict = "UNOBSERVED"
        else:
            verdict = "VIOLATION" if low > bound else "PASS"
        entry["verdict"] = verdict
        audit[name] = entry
    return audit


def _iterated_logs(N):
    out = {}
    l1 = math.log(N)
    out["log"] = l1
    out["loglog"] = math.log(l1) if l1 > 0 else None
    ll = out["loglog"]
    out["logloglog"] = math.log(ll) if ll is not None and ll > 0 else None
    return out


@dataclass
class Schedules:
    N: int
    thm1: dict
    thm2: dict
    thm3: dict
    errors: dict


def theorem_schedules(N: int, lam: float, d: int, t0: float = 1.0,
                      C: float = 1.0, k_search: int = 64) -> Schedules:
    """Asymptotic parameter choices behind the three limit results.

    ``thm1`` (cutoff): ``A = (log N)^4``, ``r = N^((1/2)(1-1/d)) / (log N)^4``
    and ``R = log N``, one member of the admissible family (``R`` faster than
    ``sqrt(logloglog N)``, slower than ``(log N)^2``).  ``thm2`` (jump
    refinement): ``R_tilde = log N``, ``s = R_tilde / (logloglog N)^(3/4)``,
    ``R = s sqrt(logloglog N)``, ``r = N^((1/4)(1-1/d)) / (log N)^4``.
    ``thm3`` (diffusion): ``A = r = (log N)^(1/2)``,
    ``R = (log N)^(1/4) (1 ^ t0) / 2``, ``R_bar = 3 C``.  Fields needing an
    undefined iterated log are None with an entry in ``errors``.
    """
    errors = {}
    if N < 2:
        raise ValueError("N must be at least 2")
    logs = _iterated_logs(N)
    ln, lll = logs["log"], logs["logloglog"]
    if lll is None or lll <= 0:
        errors["logloglog"] = f"log log log N undefined or nonpositive for N={N}"
        lll = None

    def m_for(A):
        try:
            K = k_search
            a_log = log_scales(lam, d, K)
            for k, la in enumerate(a_log, start=1):
                if ln + la <= math.log(A):
                    return k
            raise TruncationError("cutoff beyond search depth")
        except TruncationError as e:
            errors.setdefault("m", str(e))
            return None

    A1 = ln**4
    thm1 = {
        "A": A1,
        "r": mp.exp(0.5 * (1 - 1 / d) * mp.log(N)) / ln**4,
        "R": ln,
        "R_min_rate": math.sqrt(lll) if lll is not None else None,
        "m": m_for(max(A1, 1.0)),
    }
    if lll is not None:
        R_t = ln
        s = R_t / lll**0.75
        thm2 = {"A": A1, "R_tilde": R_t, "s": s, "R": s * math.sqrt(lll),
                "r": mp.exp(0.25 * (1 - 1 / d) * mp.log(N)) / ln**4, "m": thm1["m"]}
    else:
        thm2 = {"A": A1, "R_tilde": None, "s": None, "R": None,
                "r": mp.exp(0.25 * (1 - 1 / d) * mp.log(N)) / ln**4, "m": thm1["m"]}
    A3 = math.sqrt(ln)
    thm3 = {"A": A3, "r": A3, "R": ln**0.25 * min(1.0, t0) / 2, "R_bar": 3 * C,
            "m_bar": m_for(max(A3, 1.0))}
    return Schedules(N=N, thm1=thm1, thm2=thm2, thm3=thm3, errors=errors)


def first_n_satisfying_pp(lam: float, d: int, t0: float = 1.0, rho: float = 1.0,
                          max_doublings: int = 1 << 22) -> int | None:
    """Smallest ``N = 2^j`` at which the ``thm1`` schedule meets every
    PP constraint.

    Each constraint is eventually monotone in ``N`` along the schedule, so
    ``j`` is located by exponential search followed by bisection.
    """
    def ok(j):
        N = 1 << j
        s = theorem_schedules(N, lam, d, t0)
        if s.thm1["m"] is None or "logloglog" in s.errors:
            return False
        inp = BoundInputs(N=N, lam=lam, d=d, t0=t0, rho=rho, A=s.thm1["A"],
                          r=s.thm1["r"], R=s.thm1["R"], m=s.thm1["m"])
        return all(_pp_constraints(inp).values())

    lo, hi = 4, 8
    while not ok(hi):
        lo, hi = hi, 2 * hi
        if hi > max_doublings:
            return None
    while hi - lo > 1:
        mid = (lo + hi) // 2
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return 1 << hi
