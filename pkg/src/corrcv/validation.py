"""Input validation helpers used by the public constructors and estimators."""

from __future__ import annotations

import numpy as np

__all__ = ["check_matrix", "check_vector", "check_labels", "check_positive_int"]


def check_matrix(X, name: str = "X", n_rows: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float array and optionally pin the row count."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if n_rows is not None and X.shape[0] != n_rows:
        raise ValueError(f"{name} has {X.shape[0]} rows, expected {n_rows}")
    return X


def check_vector(y, name: str = "y", n: int | None = None) -> np.ndarray:
    """Coerce to a 1-D float array and optionally pin the length."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains non-finite values")
    if n is not None and y.shape[0] != n:
        raise ValueError(f"{name} has length {y.shape[0]}, expected {n}")
    return y


def check_labels(v, n_levels: int, name: str, n: int | None = None,
                 require_complete: bool = False) -> np.ndarray:
    """Validate an integer label vector with values in 1..n_levels."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional")
    if not np.issubdtype(v.dtype, np.integer):
        iv = v.astype(int)
        if not np.array_equal(iv, v):
            raise ValueError(f"{name} must contain integers")
        v = iv
    if n is not None and v.shape[0] != n:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
    if v.size and (v.min() < 1 or v.max() > n_levels):
        raise ValueError(f"{name} values must lie in 1..{n_levels}")
    if require_complete and len(np.unique(v)) != n_levels:
        raise ValueError(f"every level in 1..{n_levels} must appear in {name}")
    return v.astype(np.int64)


def check_positive_int(k, name: str, minimum: int = 1) -> int:
    k = int(k)
    if k < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {k}")
    return k
