import numpy as np
import pytest

from coordiff.diffusion import GMMParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bimodal():
    """Equal-weight 1-D mixture, means +-2, std 0.25."""
    return GMMParams([0.5, 0.5], [[-2.0], [2.0]], [[0.0625], [0.0625]])
