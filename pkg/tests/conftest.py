import numpy as np
import pytest

from mpcache.rss import PartyNet


@pytest.fixture
def net():
    return PartyNet(seed=1234)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
