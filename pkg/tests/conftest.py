import numpy as np
import pytest

from volfactor.closed_form import solve_A1B1, solve_AB
from volfactor.model import ChackoViceira, CorrelationScheme, distortion_constants
from volfactor.pde import Grid2D, solve_psi0_2d, solve_psi1_2d

# lines printed after the run, one per acceptance criterion
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def model():
    return ChackoViceira()


@pytest.fixture(scope="session")
def consts():
    return distortion_constants(-1.0, 0.5)


@pytest.fixture(scope="session")
def scheme():
    return CorrelationScheme(0.5, 0.0, -0.5, -1.0, 0.1)


@pytest.fixture(scope="session")
def riccati(model, consts):
    return solve_AB(consts, model, 0.5)


@pytest.fixture(scope="session")
def correction(riccati, scheme, consts):
    return solve_A1B1(riccati, scheme, consts)


@pytest.fixture(scope="session")
def small_grid():
    return Grid2D(z_max=100.0, n_z=41, n_t=80)


@pytest.fixture(scope="session")
def small_psi0(model, consts, small_grid):
    return solve_psi0_2d(model, consts, 0.5, small_grid)


@pytest.fixture(scope="session")
def small_psi1(model, consts, scheme, small_psi0):
    return solve_psi1_2d(model, consts, scheme, small_psi0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
