import numpy as np
import pytest

from supermarket import ModelParams, rounded_scales


@pytest.fixture
def p7():
    """lambda=0.7, d=2, N=10^4 with a small cutoff threshold (m=5)."""
    return ModelParams(lam=0.7, d=2, n_servers=10_000, t0=1.0, threshold=5.0)


def iterated_scales(lam, d, k_max):
    # a_1 = lam, a_k = lam a_{k-1}^d
    out = [lam]
    for _ in range(k_max - 1):
        out.append(lam * out[-1] ** d)
    return np.array(out)


def counts_at_a(p):
    return rounded_scales(p)


CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criteria_log(request):
    return request.config.stash[CRITERIA]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
