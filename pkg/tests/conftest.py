import numpy as np
import pytest
from hypothesis import settings

from pilotwave.wavefield import Grid1D, PhysicalParams

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture
def params():
    return PhysicalParams()


@pytest.fixture
def grid():
    return Grid1D(-16.0, 16.0, 256)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
