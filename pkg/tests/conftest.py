import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from panmamba.tensor import precision

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with precision(np.float64):
        yield np.float64


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
