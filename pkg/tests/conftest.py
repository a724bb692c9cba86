import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cslicegen.phantom import PhantomConfig, generate_volume

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_volume():
    return generate_volume(PhantomConfig(seed=7, n_slices=12))


@pytest.fixture(scope="session")
def tiny_volumes():
    return [generate_volume(PhantomConfig(seed=s, n_slices=10)) for s in (11, 12, 13)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
