import numpy as np
import pytest

from lvac import pcio, partition


@pytest.fixture(scope="session")
def tiny_cloud():
    """~70 voxels on a 16^3 grid; small enough for dense/exhaustive oracles."""
    rng = np.random.default_rng(0)
    pos = rng.integers(0, 16, size=(80, 3))
    att = rng.random((80, 3))
    return pcio.make_cloud(4, pos, att)


@pytest.fixture(scope="session")
def tiny_tree(tiny_cloud):
    return partition.build_tree(tiny_cloud, 6)


@pytest.fixture(scope="session")
def shell_cloud():
    return pcio.synthesize_cloud("sphere-shell", 6, 7)


def random_cloud(seed: int, depth: int = 4, n: int = 120):
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, 1 << depth, size=(n, 3))
    att = rng.random((n, 3))
    return pcio.make_cloud(depth, pos, att)
