from __future__ import annotations

import numpy as np
import pytest

from hybridann.datasets import gaussian_mixture, synthetic_dataset
from hybridann.index import VectorBatch, train_centroids


@pytest.fixture(scope="session")
def small_base() -> VectorBatch:
    return VectorBatch.from_array(gaussian_mixture(2000, 32, n_centers=16, seed=3))


@pytest.fixture(scope="session")
def small_index(small_base):
    return train_centroids(small_base, 32, iters=10, seed=1)


@pytest.fixture(scope="session")
def small_queries(small_base) -> VectorBatch:
    rng = np.random.default_rng(11)
    rows = rng.choice(small_base.count, 40, replace=False)
    data = small_base.data[rows] + rng.normal(scale=0.3, size=(40, small_base.dim))
    return VectorBatch.from_array(data, np.arange(1000, 1040))


@pytest.fixture(scope="session")
def desk_dataset():
    """The 10k x 128 Gaussian-mixture set with 200 held-out queries."""
    return synthetic_dataset(10_000, 128, 200, seed=0)


@pytest.fixture(scope="session")
def desk_index(desk_dataset):
    return train_centroids(desk_dataset.base, 64, seed=0)
