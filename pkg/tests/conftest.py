import sys

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, mod.N_CRITERIA + 1):
        line = mod.RESULTS.get(n)
        terminalreporter.write_line(line if line else f"[{n:2d}] NOT RUN")
