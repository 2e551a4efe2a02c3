import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# every property suite runs at least 100 seeded cases
settings.register_profile(
    "holokit",
    max_examples=100,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("holokit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def cvec(xs):
    """Pack 2n reals into a complex n-vector."""
    xs = np.asarray(xs, dtype=float)
    n = xs.shape[0] // 2
    return xs[:n] + 1j * xs[n:]
