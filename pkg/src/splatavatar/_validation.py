"""Exception types and input validation helpers shared across the package."""
from __future__ import annotations

import numpy as np


class SplatAvatarError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SplatAvatarError, ValueError):
    pass


class ConfigError(SplatAvatarError, ValueError):
    pass


class NumericalError(SplatAvatarError, ArithmeticError):
    pass


class UsageError(SplatAvatarError, RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class AnnotationError(SplatAvatarError):
    pass


class EmptyInputError(SplatAvatarError, ValueError):
    pass


def check_array(x, shape=None, name="array", dtype=np.float64, finite=True):
    """Coerce ``x`` to an ndarray and check its shape.

    ``shape`` entries may be ``None`` to accept any extent on that axis.
    """
    arr = np.asarray(x, dtype=dtype)
    if shape is not None:
        if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
            raise InvalidInputError(f"{name}: expected shape {shape}, got {arr.shape}")
    if finite and arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: contains non-finite values")
    return arr


def check_same_shape(a, b, what="inputs"):
    if np.shape(a) != np.shape(b):
        raise UsageError(f"{what} must share a shape: {np.shape(a)} vs {np.shape(b)}")


def check_positive(value, name):
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value}")
    return value


def check_is_fitted(estimator, attributes):
    from sklearn.exceptions import NotFittedError

    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit() first")
