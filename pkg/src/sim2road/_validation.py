"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import math
import numbers

import numpy as np
from sklearn.utils import check_array

from .exceptions import InvalidArgumentError


def check_finite_scalar(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise InvalidArgumentError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise InvalidArgumentError(f"{name} must be finite, got {value!r}")
    return value


def check_non_negative(value, name):
    value = check_finite_scalar(value, name)
    if value < 0:
        raise InvalidArgumentError(f"{name} must be >= 0, got {value}")
    return value


def check_positive(value, name):
    value = check_finite_scalar(value, name)
    if value <= 0:
        raise InvalidArgumentError(f"{name} must be > 0, got {value}")
    return value


def check_unit_interval(value, name):
    value = check_finite_scalar(value, name)
    if not 0.0 <= value <= 1.0:
        raise InvalidArgumentError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_points(points, min_points=1, name="points"):
    """Validate an (N, 3) array of finite points and return it as float64."""
    try:
        arr = check_array(
            points,
            dtype=np.float64,
            ensure_min_samples=min_points,
            ensure_all_finite=True,
            input_name=name,
        )
    except (ValueError, TypeError) as exc:
        raise InvalidArgumentError(str(exc)) from exc
    if arr.shape[1] != 3:
        raise InvalidArgumentError(f"{name} must have shape (N, 3), got {arr.shape}")
    return arr


def check_cost_matrix(cost):
    arr = np.asarray(cost, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"cost matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("cost matrix contains non-finite entries")
    return arr


def check_same_length(a, b, name_a, name_b):
    if len(a) != len(b):
        raise InvalidArgumentError(
            f"{name_a} and {name_b} must have equal length, got {len(a)} and {len(b)}"
        )


def wrap_angle(angle):
    """Wrap radians into [-pi, pi)."""
    wrapped = (np.asarray(angle, dtype=np.float64) + np.pi) % (2.0 * np.pi) - np.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped
