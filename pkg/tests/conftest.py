import numpy as np
import pytest

from volumix.rng import SplitMix64


@pytest.fixture
def rng():
    return SplitMix64(0)


def pytest_configure(config):
    np.set_printoptions(precision=6, suppress=True)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
