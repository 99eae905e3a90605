import numpy as np
import pytest

from jetreduce.symexpr import JetSpace


@pytest.fixture
def S1():
    return JetSpace(("x",), ("u",))


@pytest.fixture
def S2():
    return JetSpace(("x",), ("u", "v"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
