import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from dsngd.checks import random_class_matrix
from dsngd.lexyf import ModelSpec, random_natural

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@st.composite
def models(draw, stats=("minimal",), sizes=(2, 3, 4, 5)):
    """``(spec, eta)`` with eta entries uniform in [-2, 2]."""
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    s, m = draw(st.sampled_from(sizes)), draw(st.sampled_from(sizes))
    stat = draw(st.sampled_from(stats))
    S = random_class_matrix(s, rng) if stat == "custom" else None
    spec = ModelSpec(s, m, stat, class_matrix=S)
    return spec, random_natural(spec, rng)
