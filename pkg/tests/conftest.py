import numpy as np
import pytest

from cme import network as N
from cme.synthshapes import default_split


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def split():
    return default_split(variant=0)


@pytest.fixture(scope="session")
def init_params():
    return N.init_params(7)
