import time

import numpy as np
import pytest

from seirmpc.model import Params, State
from seirmpc.mpc import MpcConfig, mpc_run, synthesize_feasible_control


@pytest.fixture(scope="session")
def p():
    return Params()


@pytest.fixture(scope="session")
def case_start():
    return State(0.50, 0.18, 0.01, 0.31)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def case_run(p, case_start):
    """The case-study MPC run (delta=1, T=25) and its wall time; shared because it takes ~30 s."""
    t0 = time.perf_counter()
    res = mpc_run(case_start, MpcConfig(), p)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def case_closed_loop(case_run):
    return case_run[0]


@pytest.fixture(scope="session")
def case_synth(p, case_start):
    return synthesize_feasible_control(case_start, p)



# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
