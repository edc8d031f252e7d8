import numpy as np
import pytest

from stein_select.schemas import KernelFamily, KernelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def rbf():
    def make(dim, bandwidth=1.0):
        return KernelSpec(family=KernelFamily.RBF, dim=dim, bandwidth=bandwidth)

    return make


@pytest.fixture
def imq():
    def make(dim, beta=-0.5, c=1.0):
        return KernelSpec(family=KernelFamily.FACTORED_IMQ, dim=dim, beta=beta, c=c)

    return make
