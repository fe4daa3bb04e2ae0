import numpy as np
import pytest

from iradonmap.geometry import ImagingGeometry, build_bp_table


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def geom32():
    return ImagingGeometry(32, 32, 45, 47)


@pytest.fixture(scope="session")
def table32(geom32):
    return build_bp_table(geom32)
