import numpy as np
import pytest

from arac.policy import NfPolicy

_CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_policy(rng, state_dim=1, action_dim=2, n_flows=2, hidden=4, sigma_mode="learned",
                 mean_scale=1.0):
    """A policy with non-trivial flows so gradients through every layer are exercised."""
    pi = NfPolicy(state_dim, action_dim, n_flows=n_flows, hidden=hidden, sigma_mode=sigma_mode,
                  sigma=0.8, rng=rng, mean_scale=mean_scale, flow_beta_scale=0.8)
    return pi


@pytest.fixture
def report():
    """Record one acceptance line; echoed now and again in the terminal summary."""
    def record(number, ok, detail=""):
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
