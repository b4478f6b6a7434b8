"""Input validation helpers shared by the functional API and the estimators."""

import numbers

import numpy as np


def check_points(points, name="points"):
    """Return ``points`` as a finite float64 ``(n, 3)`` array."""
    from .core import DomainError

    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DomainError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
        raise DomainError(f"{name} contains a non-finite coordinate at row {bad}")
    return arr


def check_labels(labels, n, name="labels"):
    """Return ``labels`` as a non-negative int64 array of length ``n``."""
    from .core import DomainError

    arr = np.asarray(labels)
    if arr.ndim != 1 or len(arr) != n:
        raise DomainError(f"{name} must have shape ({n},), got {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        as_int = arr.astype(np.int64)
        if not np.array_equal(as_int, arr):
            raise DomainError(f"{name} must be integer class ids")
        arr = as_int
    arr = arr.astype(np.int64, copy=False)
    if arr.size and arr.min() < 0:
        raise DomainError(f"{name} must be non-negative class ids")
    return arr


def check_positive(value, name, integer=False, minimum=None):
    from .core import DomainError

    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind) or not np.isfinite(value):
        raise DomainError(f"{name} must be a finite {'integer' if integer else 'number'}, got {value!r}")
    if minimum is not None:
        if value < minimum:
            raise DomainError(f"{name} must be >= {minimum}, got {value!r}")
    elif value <= 0:
        raise DomainError(f"{name} must be positive, got {value!r}")
    return value


def as_cloud(X, y=None):
    """Coerce estimator input (array or LabeledCloud) into a LabeledCloud."""
    from .core import LabeledCloud

    if isinstance(X, LabeledCloud):
        if y is None:
            return X
        return X.with_labels(y)
    return LabeledCloud(check_points(X, "X"), y)
