import numpy as np
import pytest

from histlayer.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    # small enough to train in a couple of seconds inside a test
    return RunConfig(n_train=40, n_val=20, n_test=20, H=8, W=8,
                     epochs=2, decay_epoch=1)
