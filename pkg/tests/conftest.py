import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_coord_set(rng, extent, max_n):
    n = int(rng.integers(1, max_n + 1))
    return np.unique(rng.integers(0, extent, size=(n, 2)), axis=0)
