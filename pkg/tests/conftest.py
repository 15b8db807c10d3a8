import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tierkv.workload import TraceShape, gen_longtail_trace, gen_recall_task

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_shape():
    return TraceShape(n_layers=2, n_heads=2, head_dim=4, prompt_len=8, chain_len=300)


@pytest.fixture(scope="session")
def longtail_small(small_shape):
    return gen_longtail_trace(small_shape, 0.565, seed=3)


@pytest.fixture(scope="session")
def longtail_default():
    return gen_longtail_trace(TraceShape(), 0.565, seed=0)


@pytest.fixture(scope="session")
def recall_default():
    return gen_recall_task(TraceShape(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
