import numpy as np
import pytest

from evade_bench import make_blobs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def three_blobs():
    centers = np.array([[0.0, 0.0], [2.0, 0.0], [-1.0, 3.5]])
    return make_blobs(c=3, d=2, n_per_class=50, centers=centers, spread=0.4, seed=0)
