import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_rng(seed):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
