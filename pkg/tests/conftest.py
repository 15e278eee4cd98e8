import numpy as np
import pytest

from pcfsobolev.spec_core import preset

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def sg():
    return preset("sg")


@pytest.fixture(scope="session")
def interval():
    return preset("interval")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
