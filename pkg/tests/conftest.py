import numpy as np
import pytest

from nlgrad import grid as gridmod
from nlgrad import kernels, operators

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def params():
    return kernels.KernelParams(n=2, s=0.5, delta=0.25)


@pytest.fixture(scope="session")
def profile(params):
    return kernels.build_Q_profile(params)


@pytest.fixture(scope="session")
def domain():
    return gridmod.BoxDomain((0.0, 0.0), (1.0, 1.0), 0.25)


class Level:
    def __init__(self, params, profile, domain, divisor):
        self.grid = gridmod.build_grid(domain, domain.delta / divisor)
        self.op = operators.assemble_gradient(self.grid, params)
        self.conv = operators.assemble_convolution(self.grid, profile)


_levels = {}


@pytest.fixture(scope="session")
def level(params, profile, domain):
    """Factory: ``level(8)`` gives grid/op/conv at ``h = delta/8`` (cached)."""

    def make(divisor):
        if divisor not in _levels:
            _levels[divisor] = Level(params, profile, domain, divisor)
        return _levels[divisor]

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
