"""Input validation helpers used across the estimator surfaces."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, ZeroVector

ZERO_THRESHOLD = 1e-12
UNIT_TOLERANCE = 1e-6


def as_float_vector(v, dtype=np.float32) -> np.ndarray:
    """Coerce to a 1-D float array, rejecting NaN/inf components."""
    arr = np.asarray(v, dtype=dtype)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains NaN or infinite components")
    return arr


def as_float_matrix(x, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or infinite components")
    return arr


def check_same_dimension(*vectors: np.ndarray) -> int:
    dims = {v.shape[-1] for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed dimensions {sorted(dims)}")
    return dims.pop()


def check_nonzero(v: np.ndarray) -> np.ndarray:
    if not np.any(np.abs(v) >= ZERO_THRESHOLD):
        raise ZeroVector("all components below 1e-12 in magnitude")
    return v


def is_unit(v: np.ndarray, tol: float = 1e-3) -> bool:
    return abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) <= tol
