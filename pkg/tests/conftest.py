import numpy as np
import pytest
from hypothesis import settings, HealthCheck

# Numeric property tests do real linear algebra per example; the default
# 200ms deadline trips on cold numpy caches, not on genuine regressions.
settings.register_profile(
    "numeric",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("numeric")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
