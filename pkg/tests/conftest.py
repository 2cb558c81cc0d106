"""Shared fixtures for the SpyGR test suite."""

import numpy as np
import pytest

from spygr.core.layer import AttentionMode, SpyGRParams
from spygr.core.tensor import Tensor


@pytest.fixture
def rng():
    """Seeded generator so every test run sees the same draws."""
    return np.random.default_rng(1234)


@pytest.fixture
def random_x(rng):
    def make(c=8, h=7, w=7, n=1):
        return Tensor(rng.standard_normal((n, c, h, w)), name="x")
    return make


@pytest.fixture
def make_params(rng):
    def make(c=8, m=4, c_out=None, mode=AttentionMode.DYNAMIC, include_identity=True, epsilon=1e-6):
        return SpyGRParams.init(c, m, c_out, mode, include_identity, epsilon, rng)
    return make
