import numpy as np
import pytest

from saddleprobe.forward import make_cauchy, standard_phantom
from saddleprobe.mesh import build_grid


@pytest.fixture(scope="session")
def grid33():
    return build_grid(33, 33)


@pytest.fixture(scope="session")
def phantom33(grid33):
    return make_cauchy(grid33, standard_phantom())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
