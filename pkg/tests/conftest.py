import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from activerep.model import Dimensions, make_ground_truth

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_truth():
    return make_ground_truth(Dimensions(20, 20, 10, 10, 10, 2), "well", sigma=0.0, seed=3)


@pytest.fixture(scope="session")
def ill_truth():
    return make_ground_truth(Dimensions(12, 12, 8, 8, 8, 3), "ill", kappa=4.0, sigma=1.0,
                             seed=5)


def random_orthonormal(rng, d, k):
    q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return q
