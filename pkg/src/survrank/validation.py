"""Input validation helpers for the estimator API."""
from __future__ import annotations

import numpy as np


def _writable(arr: np.ndarray) -> np.ndarray:
    # read-only inputs are copied so compiled kernels see one array type
    return arr.copy() if not arr.flags.writeable else arr


def as_float_matrix(X, name: str = "X") -> np.ndarray:
    X = _writable(np.ascontiguousarray(X, dtype=np.float64))
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got ndim={X.ndim}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def as_float_vector(y, n: int | None = None, name: str = "y") -> np.ndarray:
    y = _writable(np.ascontiguousarray(y, dtype=np.float64).ravel())
    if n is not None and len(y) != n:
        raise ValueError(f"{name} has length {len(y)}, expected {n}")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains non-finite values")
    return y


def as_binary_vector(a, n: int | None = None, name: str = "a") -> np.ndarray:
    a = as_float_vector(a, n, name)
    bad = ~np.isin(a, (0.0, 1.0))
    if bad.any():
        raise ValueError(f"{name} must be binary 0/1; offending values "
                         f"{np.unique(a[bad])[:5]}")
    return a
