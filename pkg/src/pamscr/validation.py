"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class DataError(ValueError):
    """Raised when input data violate a documented contract."""


def as_float_array(x, name: str, ndim: int | None = None, shape=None) -> np.ndarray:
    """Coerce to a float64 ndarray and check dimensionality/shape."""
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got ndim={arr.ndim}")
    if shape is not None:
        for axis, expected in enumerate(shape):
            if expected is not None and arr.shape[axis] != expected:
                raise DataError(
                    f"{name} has shape {arr.shape}, expected axis {axis} of size {expected}"
                )
    return arr


def check_finite(x: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DataError(f"{name} contains non-finite values")
    return x


def check_probability(value: float, name: str, open_interval: bool = True) -> float:
    value = float(value)
    if open_interval:
        if not 0.0 < value < 1.0:
            raise DataError(f"{name} must lie in (0, 1), got {value}")
    elif not 0.0 <= value <= 1.0:
        raise DataError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0.0:
        raise DataError(f"{name} must be positive, got {value}")
    return value


def check_non_negative(value: float, name: str) -> float:
    value = float(value)
    if not value >= 0.0:
        raise DataError(f"{name} must be non-negative, got {value}")
    return value
