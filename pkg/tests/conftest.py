import numpy as np
import pytest

from leo_gfra.grid import make_grid, default_grid


@pytest.fixture
def grid():
    return default_grid()


@pytest.fixture
def small_grid():
    return make_grid(4, 6, 3750.0, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
