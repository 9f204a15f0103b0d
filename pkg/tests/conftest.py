import numpy as np
import pytest

from forestseg.core import PointCloud
from forestseg.synthgen import ForestParams, generate_forest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def labeled_cloud(rng):
    """Small hand-rolled cloud with consistent semantic/instance labels."""
    n_tree = 60
    tree_pos = rng.uniform(0.0, 4.0, size=(n_tree, 3)) + np.array([0.0, 0.0, 1.0])
    ground_pos = np.c_[rng.uniform(0.0, 4.0, size=(40, 2)), rng.uniform(0.0, 0.05, size=40)]
    semantic = np.r_[rng.integers(1, 3, size=n_tree), np.zeros(40, dtype=int)]
    instance = np.r_[rng.integers(1, 4, size=n_tree), np.zeros(40, dtype=int)]
    return PointCloud(
        positions=np.vstack([tree_pos, ground_pos]),
        semantic=semantic,
        instance=instance,
    )


@pytest.fixture(scope="session")
def small_forest():
    return generate_forest(ForestParams(n_trees=8, plot_size=12.0, ground_density=6.0, seed=11))
