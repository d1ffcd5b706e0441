"""Shared fixtures: the expensive flow tables are built once per session."""
import numpy as np
import pytest

from qbsde.functions import DriftFunction
from qbsde.generators import DriftQuadratic
from qbsde.stochastic import TimeGrid
from qbsde.transforms import construct_f, psi_from_k


@pytest.fixture(scope="session")
def linear_drift():
    return DriftFunction.from_expr("0.1*y")


@pytest.fixture(scope="session")
def constrained_f(linear_drift):
    """f built along characteristics from f0 = 0.05 under h = 0.1 y."""
    return construct_f(linear_drift, 0.05, TimeGrid(0.0, 1.0, 400), (-8.0, 8.0), 641)


@pytest.fixture(scope="session")
def drift_quadratic(linear_drift, constrained_f):
    return DriftQuadratic(linear_drift, constrained_f)


@pytest.fixture(scope="session")
def psi_005():
    return psi_from_k(0.05, (-4.0, 4.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERION_LINES = []


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return CRITERION_LINES


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
