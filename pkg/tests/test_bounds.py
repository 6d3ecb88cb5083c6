import json
import math

import pytest

from supermarket.bounds import (
    BoundInputs, bound_report, bound_vs_frequency, bounds_pp, bounds_qq, bounds_rr,
    first_n_satisfying_pp, theorem_schedules,
)


def _inp(**kw):
    base = dict(N=10**4, lam=0.5, d=2, t0=1.0, rho=1.0, A=10.0, r=2.0, R=3.0, m=3)
    base.update(kw)
    return BoundInputs(**base)


def test_pp_hand_values():
    p = _inp()
    assert (p.sigma, p.L, p.H) == (2.0, 10.0, 1.0)
    p1, p2, p3, p4, _ = bounds_pp(p)
    assert p1 == pytest.approx(0.04, rel=1e-12)
    assert p3 == pytest.approx(1.0, rel=1e-12)
    # independent float evaluation
    assert p2 == pytest.approx(10 ** 0.75 * 2 * 2 * 3 / (10**4) ** 0.25, rel=1e-12)
    assert p4 == pytest.approx(6 * math.exp(-9 / (20 * 4 * math.exp(20))), rel=1e-12)


def test_qq_hand_value():
    p5, p6, _ = bounds_qq(_inp())
    assert p5 == pytest.approx(4 * math.exp(20), rel=1e-12)
    assert p6 is None
    _, p6, _ = bounds_qq(_inp(R_tilde=5.0))
    assert p6 == pytest.approx(6 * math.exp(-25 / (20 * 3 * 10 * math.exp(20))), rel=1e-12)


def test_rr_hand_value():
    p7, p8, _ = bounds_rr(_inp(A=100.0, R_bar=10.0))
    assert p7 == pytest.approx(0.25)
    assert p8 == pytest.approx(3 * (0.01 + (10 * math.log(100)) ** -2), rel=1e-12)
    assert p8 == pytest.approx(0.0314, abs=1e-4)
    with pytest.raises(ValueError):
        bounds_rr(_inp(), C=0.0)


def test_p3_infinite_when_r_not_above_rho():
    _, _, p3, _, flags = bounds_pp(_inp(r=1.0))
    assert p3 == math.inf and not flags["r_gt_rho"]
    assert json.loads(bound_report(_inp(r=1.0)).to_json())["p"]["p3"] == "inf"


def test_limits():
    p4 = [bounds_pp(_inp(R=R))[3] for R in (1e3, 1e5, 1e6, 1e7)]
    assert all(x > y for x, y in zip(p4, p4[1:])) and p4[-1] < 1e-300
    assert bounds_pp(_inp(N=10**30))[0] < 1e-20
    assert bounds_qq(_inp(r=1e12))[0] < 1e-6
    assert bounds_rr(_inp(r=1e6))[0] < 1e-11
    big = bounds_rr(_inp(A=1e200, R_bar=10.0))[1]
    assert big == pytest.approx(3 * (10 * math.log(1e200)) ** -2, rel=1e-10)


def test_flags_match_inequalities():
    p = _inp(N=6 * 10**7, t0=0.1, A=100.0, r=1.5, R=1.0, R_bar=10.0, m=5)
    f = bound_report(p).constraints
    lower = 2 * 1.5 * 100 * 0.1 * math.exp(1.0) / (6e7) ** 0.25
    assert f["PP"]["R_lower"] == (lower <= 1.0)
    assert f["PP"]["R_upper"] == (1.0 <= 0.1 * 10)
    assert f["RR"]["A_ge_e^2"] and f["RR"]["R_le_sqrt(A)/2"]
    assert f["RR"]["R_bar_upper"] == (10 <= 100 / (2 * math.log(100)))
    assert bound_report(p).holds("PP") and bound_report(p).holds("RR")
    assert not bound_report(_inp()).holds("PP")


def test_total_and_json():
    rep = bound_report(_inp())
    assert rep.total("PP") == 1.0
    body = json.loads(rep.to_json())
    assert set(body) == {"inputs", "p", "constraints", "formulas", "totals"}
    assert body["formulas"]["p1"] == "A^d r^d t0 / N^(d-1)"
    assert body["inputs"]["sigma"] == 2.0


def test_m_consistency():
    assert BoundInputs(N=10**5, lam=0.5, d=2, t0=1, rho=1, A=5, r=2, R=1, m=4).m_consistent()
    assert not BoundInputs(N=10**5, lam=0.5, d=2, t0=1, rho=1, A=5, r=2, R=1, m=3).m_consistent()


def test_verdicts():
    good = _inp(N=6 * 10**7, t0=0.1, A=100.0, r=1.5, R=1.0, R_bar=10.0, m=5)
    rep = bound_report(good)
    audit = bound_vs_frequency(rep, {"p1": {"ci": (0.0, 0.01)}, "p3": (60, 100),
                                     "p4": (0, 100), "p2": (0, 100)})
    assert audit["p4"]["verdict"] == "VACUOUS"
    assert audit["p3"]["verdict"] == "VIOLATION"  # 0.6 > 0.2
    assert audit["p2"]["verdict"] == "PASS"
    assert audit["p8"]["verdict"] == "UNOBSERVED"
    p1 = _inp(A=10.0, r=2.0)  # PP constraints fail here
    audit = bound_vs_frequency(bound_report(p1), {"p1": (99, 100)})
    assert audit["p1"]["verdict"] == "SKIPPED"
    audit = bound_vs_frequency(rep, {"p1": {"ci": (0.0, 0.01)}})
    assert rep.p["p1"] < 0.01 and audit["p1"]["verdict"] == "PASS"


def test_schedule_thm1_values():
    s = theorem_schedules(10**6, 0.9, 2)
    assert float(s.thm1["r"]) == pytest.approx(10**1.5 / math.log(1e6) ** 4, rel=1e-12)
    assert float(s.thm1["r"]) == pytest.approx(8.68e-4, rel=1e-3)
    assert s.thm1["m"] == 6
    assert s.thm3["m_bar"] >= s.thm1["m"]
    assert s.thm3["A"] == pytest.approx(math.sqrt(math.log(1e6)))


def test_schedule_domain():
    assert "logloglog" not in theorem_schedules(16, 0.5, 2).errors
    assert "logloglog" in theorem_schedules(15, 0.5, 2).errors
    assert theorem_schedules(15, 0.5, 2).thm2["R"] is None
    with pytest.raises(ValueError):
        theorem_schedules(1, 0.5, 2)


def test_thm2_schedule():
    s = theorem_schedules(10**8, 0.5, 2)
    lll = math.log(math.log(math.log(1e8)))
    assert s.thm2["R"] == pytest.approx(math.log(1e8) / lll**0.75 * lll**0.5)


def test_first_n_satisfying_pp():
    N = first_n_satisfying_pp(0.9, 2)
    assert N == 2**63555
    j = N.bit_length() - 1
    s = theorem_schedules(N, 0.9, 2)
    s_prev = theorem_schedules(1 << (j - 1), 0.9, 2)
    from supermarket.bounds import _pp_constraints
    ok = lambda N_, s_: all(_pp_constraints(BoundInputs(
        N=N_, lam=0.9, d=2, t0=1.0, rho=1.0, A=s_.thm1["A"], r=s_.thm1["r"],
        R=s_.thm1["R"], m=s_.thm1["m"])).values())
    assert ok(N, s) and not ok(1 << (j - 1), s_prev)
