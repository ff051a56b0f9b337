import numpy as np
import pytest

from ookgate.vecstore import build_index


@pytest.fixture
def toy_index():
    rows = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]
    return build_index(rows, ["d1", "d2", "d3"], "cosine")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
