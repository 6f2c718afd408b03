import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfrelax import LqParams, LqRiccatiOracle, TimeGrid, make_chattering_problem, make_lq_meanfield

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def lq_params():
    return LqParams()


@pytest.fixture(scope="session")
def lq_spec(lq_params):
    return make_lq_meanfield(lq_params)


@pytest.fixture(scope="session")
def chatter_spec():
    return make_chattering_problem()


@pytest.fixture(scope="session")
def grid200():
    return TimeGrid(1.0, 200)


@pytest.fixture(scope="session")
def lq_oracle(lq_params, grid200):
    return LqRiccatiOracle(lq_params, grid200)


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line, printed again in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def rng(seed=0):
    return np.random.default_rng(seed)
