"""Shared fixtures: small synthetic volumes and phantoms that keep the test suite fast."""

import numpy as np
import pytest

from cardiophase.imgvol import Volume4D
from cardiophase.phantom import PhantomConfig, generate_phantom


@pytest.fixture
def rng():
    """Seeded generator so every test sees the same random numbers."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_volume(rng):
    """Random 4 x 5 x 6 x 7 float32 sequence with anisotropic spacing."""
    data = rng.normal(size=(4, 5, 6, 7)).astype(np.float32)
    return Volume4D(data, (2.0, 1.5, 1.0), frame_duration=30.0)


@pytest.fixture
def small_phantom_config():
    """A 12-frame phantom on a 8 x 24 x 24 grid."""
    return PhantomConfig(shape=(12, 8, 24, 24), inner_radius=6.0, wall_thickness=2.0)


@pytest.fixture
def small_phantom(small_phantom_config):
    return generate_phantom(small_phantom_config)


def gaussian_blob(shape, center, sigma=2.0):
    """Smooth 3D blob used as a registration target."""
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return np.exp(-r2 / (2.0 * sigma**2))


@pytest.fixture
def blob():
    return gaussian_blob
