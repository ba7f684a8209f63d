import numpy as np
import pytest

from entrainlab.signals import ControlBounds, MeanTargets, PeriodicControl, make_constant


@pytest.fixture
def bounds():
    return ControlBounds(0.1, 0.9)


@pytest.fixture
def means():
    return MeanTargets(0.3, 0.6)


@pytest.fixture
def constant(bounds, means):
    return make_constant(10.0, bounds, means)


@pytest.fixture
def square(bounds):
    # u0 in {0.1, 0.5} half a period each (mean 0.3), u1 = 0.6
    return PeriodicControl(10.0, [0.0, 5.0, 10.0], [0.1, 0.5], [0.6, 0.6], bounds)


@pytest.fixture
def bangbang(bounds):
    # u0 high for 2.5, u1 high for 6.25: means 0.3 and 0.6
    return PeriodicControl(10.0, [0.0, 2.5, 6.25, 10.0], [0.9, 0.1, 0.1], [0.9, 0.9, 0.1], bounds)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
