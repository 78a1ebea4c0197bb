import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(rng, shape, scale=1.0, grad=True):
    """Random float64 tensor helper used by the gradient tests."""
    from statetrack.numerics import Tensor

    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=grad, dtype=np.float64)
