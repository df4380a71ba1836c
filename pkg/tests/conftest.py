import numpy as np
import pytest

from flcarbon.model import MlpArchitecture


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_arch():
    return MlpArchitecture(input_dim=4, hidden_dims=(5,), n_classes=3)
