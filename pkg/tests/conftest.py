import numpy as np
import pytest

from gpswarm.gp import NoiseModel
from gpswarm.kernel import KernelParams, build_basis
from gpswarm.world import Agent, World


@pytest.fixture(scope="session")
def kernel_1d():
    return KernelParams(1.0, [8.0])


@pytest.fixture(scope="session")
def basis_1d(kernel_1d):
    # domain [0, 20]: measure centered at 10 with width = half-width / 2
    return build_basis(kernel_1d, 5.0, 40, measure_center=10.0)


@pytest.fixture(scope="session")
def kernel_2d():
    return KernelParams(1.0, [8.0, 8.0])


@pytest.fixture(scope="session")
def basis_2d(kernel_2d):
    return build_basis(kernel_2d, [5.0, 5.0], 25, measure_center=[10.0, 10.0])


@pytest.fixture(scope="session")
def noise():
    return NoiseModel(0.01)


@pytest.fixture
def open_world():
    return World(bounds=[[0.0, 20.0], [0.0, 20.0]], obstacles=[], agents=[],
                 d_comm=10.0)


@pytest.fixture
def walled_world():
    # interior block plus a wall with a one-sided gap
    return World(bounds=[[0.0, 20.0], [0.0, 20.0]],
                 obstacles=[[[8.0, 12.0], [8.0, 12.0]],
                            [[0.0, 6.0], [15.0, 15.5]]],
                 agents=[], d_comm=10.0)


def make_agents(positions, speed=1.0):
    return [Agent(id=i, position=np.asarray(p, dtype=float), speed=speed)
            for i, p in enumerate(positions)]
