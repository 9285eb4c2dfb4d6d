import numpy as np
import pytest

from mimic_mpc.dynamics import VehicleParams, Track, build_default_track


@pytest.fixture(scope="session")
def params():
    return VehicleParams()


@pytest.fixture(scope="session")
def default_track():
    return build_default_track()


@pytest.fixture(scope="session")
def straight_track():
    return Track(np.zeros(1200), 1.0, 3.5)
