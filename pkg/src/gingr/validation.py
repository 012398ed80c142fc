"""Input validation helpers shared by the public API and the estimator."""

import numbers

import numpy as np

from .exceptions import ConfigError, ValidationError


def check_points(points, name="points", dims=(2, 3), min_points=1):
    """Return ``points`` as a C-contiguous float64 array of shape (n, d).

    Raises :class:`ValidationError` for wrong shape, too few points or
    non-finite coordinates.
    """
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size in dims:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if dims is not None and arr.shape[1] not in dims:
        raise ValidationError(f"{name} must have dimension in {tuple(dims)}, got {arr.shape[1]}")
    if arr.shape[0] < min_points:
        raise ValidationError(f"{name} needs at least {min_points} point(s), got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
        raise ValidationError(f"{name} has a non-finite coordinate at row {bad}")
    return np.ascontiguousarray(arr)


def check_field(field, n, d, name="field"):
    arr = np.asarray(field, dtype=np.float64)
    if arr.shape != (n, d):
        raise ValidationError(f"{name} must have shape {(n, d)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_indices(indices, n, name="indices"):
    idx = np.asarray(indices)
    if idx.size == 0:
        return np.zeros(0, dtype=np.intp)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValidationError(f"{name} must be integers")
    idx = idx.astype(np.intp).ravel()
    if idx.min() < 0 or idx.max() >= n:
        raise ValidationError(f"{name} out of range [0, {n})")
    return idx


def check_positive(value, name, strict=True):
    """Validate a finite scalar parameter; errors name the offending field."""
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ConfigError(f"must be a finite number, got {value!r}", field=name)
    if (strict and value <= 0) or (not strict and value < 0):
        raise ConfigError(f"must be {'> 0' if strict else '>= 0'}, got {value!r}", field=name)
    return float(value)


def as_generator(seed):
    """Accept an int seed, ``None`` or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
