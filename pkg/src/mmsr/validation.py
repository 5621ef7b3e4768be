"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def require(condition: bool, message: str, exc: type[Exception] = ValueError) -> None:
    if not condition:
        raise exc(message)


def as_float_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    require(arr.ndim == 2, f"{name} must be 2-dimensional, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf entries")
