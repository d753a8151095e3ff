"""Input-validation helpers used by the estimator classes and free functions."""

import numbers

import numpy as np
from sklearn.exceptions import NotFittedError

from .errors import InvalidInput


def check_array_2d(x, name="array"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidInput(f"{name} must be a non-empty 2-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput(f"{name} contains non-finite values")
    return x


def check_vector(x, name="vector", dim=None):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise InvalidInput(f"{name} is empty")
    if dim is not None and x.size != dim:
        raise InvalidInput(f"{name} must have dimension {dim}, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput(f"{name} contains non-finite values")
    return x


def check_positive_int(value, name):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value <= 0:
        raise InvalidInput(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_non_negative_int(value, name):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < 0:
        raise InvalidInput(f"{name} must be a non-negative integer, got {value!r}")
    return int(value)


def check_fitted(estimator, attributes):
    """Raise sklearn's NotFittedError unless every named attribute is set."""
    if isinstance(attributes, str):
        attributes = [attributes]
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; "
            f"call fit before using this method (missing {missing})"
        )


def check_same_length(name_a, a, name_b, b):
    if len(a) != len(b):
        raise InvalidInput(
            f"{name_a} and {name_b} must have equal length, got {len(a)} vs {len(b)}"
        )
