import os

# keep BLAS single-threaded before numpy initializes: the model's matrices
# are small and timing assertions assume the single-thread regime
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from pcnormals import datagen
from pcnormals.cloud import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_cloud(rng):
    return PointCloud(rng.uniform(-1.0, 1.0, size=(500, 3)))


@pytest.fixture(scope="session")
def sphere_cloud():
    return datagen.gen_shape(datagen.ShapeSpec(kind="sphere", n_points=2000, seed=42))


def brute_knn(points: np.ndarray, q, k: int) -> np.ndarray:
    """Independent O(nk) oracle: sort by squared distance, ties by index."""
    q = np.asarray(q, dtype=float)
    d2 = ((points - q) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(points)), d2))
    return order[:k]
