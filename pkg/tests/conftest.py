import numpy as np
import pytest

from petgamma.density import SpacetimeDensity, gaussian_blob, moving_blob
from petgamma.geometry import GeometryConfig


@pytest.fixture(scope="session")
def geo16():
    return GeometryConfig(grid_n=16, nt=4)


@pytest.fixture(scope="session")
def geo32():
    return GeometryConfig(grid_n=32, nt=8)


def static_density(geo, center=(0.1, 0.0), sigma=0.12, mass=1.0):
    f = mass * gaussian_blob(geo.grid(), center, sigma)
    return SpacetimeDensity(np.repeat(f[None], geo.nt + 1, axis=0), geo.grid(), geo.T_horizon)


def translating(geo, start=(-0.2, 0.05), end=(0.2, 0.05), sigma=0.12):
    return moving_blob(geo.grid(), geo.nt, start, end, sigma, geo.T_horizon)
