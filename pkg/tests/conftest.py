import numpy as np
import pytest

from survrank.dataset import Dataset


@pytest.fixture
def km_dataset():
    """times/status (1,1), (2,0), (3,2), (4,0): censoring curve drops to
    2/3 at t=2 and to 0 at t=4."""
    return Dataset(["r0", "r1", "r2", "r3"],
                   [1.0, 2.0, 3.0, 4.0], [1, 0, 2, 0],
                   np.array([[1], [0], [1], [0]]),
                   np.array([[0.0], [1.0], [2.0], [3.0]]),
                   ["t1"], ["x1"], [False])


@pytest.fixture
def competing_dataset():
    """times/status (1,2), (2,1), (3,0): competing curve drops to 2/3 at t=1."""
    return Dataset(["r0", "r1", "r2"],
                   [1.0, 2.0, 3.0], [2, 1, 0],
                   np.array([[1], [0], [1]]),
                   np.zeros((3, 1)),
                   ["t1"], ["x1"], [False])


def random_survival_dataset(rng, n, k=2, p=2, time_grid=None):
    """Small dataset with forced ties for product-limit stress tests."""
    if time_grid is None:
        time_grid = [0.0, 0.5, 1.0, 1.5, 2.0]
    times = rng.choice(time_grid, size=n)
    status = rng.integers(0, 3, size=n)
    treat = rng.integers(0, 2, size=(n, k))
    cov = rng.uniform(0, 1, size=(n, p))
    return Dataset([str(i) for i in range(n)], times, status, treat, cov,
                   [f"t{j + 1}" for j in range(k)],
                   [f"x{j + 1}" for j in range(p)], [False] * p)
