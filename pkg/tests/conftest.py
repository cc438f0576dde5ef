import numpy as np
import pytest

from csl_lab.core import RunConfig, two_branch_delta_scenario, unit_params


@pytest.fixture
def cat():
    """Two branches in one cell, dN = 4, |a_1|^2 = 2/3."""
    return two_branch_delta_scenario(unit_params(), 4, 2 / 3)


@pytest.fixture
def short_run():
    return RunConfig(dt=1e-3, t_max=0.2, trials=200, master_seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
