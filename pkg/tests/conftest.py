import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rand64(rng, *shape, requires_grad=True):
    from senformer.tensor import Tensor

    return Tensor(rng.normal(size=shape), requires_grad=requires_grad, dtype=np.float64)
