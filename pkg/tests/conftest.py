import numpy as np
import pytest

from morphreg import GridDesc, MaskImage, ScalarImage, VectorField, build_kernel


@pytest.fixture
def grid8():
    return GridDesc((8, 8))


@pytest.fixture
def grid16():
    return GridDesc((16, 16))


@pytest.fixture
def grid3d():
    return GridDesc((6, 8, 10), (1.0, 0.5, 2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def kernel16(grid16):
    return build_kernel(grid16)


def random_image(grid: GridDesc, rng, lo=0.05, hi=0.95) -> ScalarImage:
    return ScalarImage(grid, rng.uniform(lo, hi, grid.sizes))


def random_field(grid: GridDesc, rng, scale=1.0) -> VectorField:
    return VectorField(grid, scale * rng.standard_normal((grid.dim,) + grid.sizes))


def random_binary_mask(grid: GridDesc, rng, p=0.3) -> MaskImage:
    return MaskImage(grid, (rng.random(grid.sizes) < p).astype(np.float64))
