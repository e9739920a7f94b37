import numpy as np
import pytest

from provgraph.nn import Dense, ReLU, TargetModel


@pytest.fixture
def tiny_mlp():
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    w2 = np.array([[1.0, 0.0], [-1.0, 1.0]])
    return TargetModel([Dense(w1, np.array([0.0, -1.0])), ReLU(), Dense(w2, np.array([0.5, 0.0]))], (2,), 2)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
