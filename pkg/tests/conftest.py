import numpy as np
import pytest

from cmomlab import synthgen


@pytest.fixture(scope="session")
def world():
    return synthgen.WorldSpec(seed=3)


@pytest.fixture(scope="session")
def styles():
    return synthgen.default_styles()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
