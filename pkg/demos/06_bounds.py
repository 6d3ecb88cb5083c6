"""Closed-form failure probabilities, their constraints and the asymptotic schedules."""
from supermarket.bounds import (BoundInputs, bound_report, bound_vs_frequency,
                                first_n_satisfying_pp, theorem_schedules)

inp = BoundInputs(N=6 * 10**7, lam=0.5, d=2, t0=0.1, rho=1.0, A=100.0, r=1.5, R=1.0,
                  m=5, R_bar=10.0)
rep = bound_report(inp)
for name, v in rep.p.items():
    print(f"{name} = {v}")
print("constraints hold:", {k: rep.holds(k) for k in ("PP", "QQ", "RR")})
audit = bound_vs_frequency(rep, {"p1": (0, 150), "p3": (3, 150)})
print({k: v["verdict"] for k, v in audit.items()})

s = theorem_schedules(10**6, 0.9, 2)
print("first schedule at N = 1e6:", {k: float(v) if v is not None else None
                                     for k, v in s.thm1.items()})
N = first_n_satisfying_pp(0.9, 2)
print(f"first N = 2^{N.bit_length() - 1} meets every constraint on the first schedule")
