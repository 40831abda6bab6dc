"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from .exceptions import DimensionError, NumericDivergenceError, ValidationError


def as_batch(x, dim=None, name="x"):
    """Return ``x`` as a float64 2-D array and whether it was 1-D.

    A 1-D input is promoted to a single-row batch so that every numeric kernel
    can assume ``(n, d)`` layout.
    """
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
        squeeze = True
    elif squeeze:
        arr = arr[None, :]
    elif arr.ndim != 2:
        raise DimensionError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"{name} has width {arr.shape[1]}, expected {dim}")
    return arr, squeeze


def broadcast_cond(cond, n, width=None, name="cond"):
    """Broadcast conditioning to ``(n, c)``; ``None`` means an empty vector."""
    if cond is None:
        c = np.zeros((n, 0))
    else:
        c = np.asarray(cond, dtype=np.float64)
        if c.ndim == 1:
            c = np.broadcast_to(c, (n, c.shape[0]))
        elif c.ndim != 2 or c.shape[0] not in (1, n):
            raise DimensionError(f"{name} shape {c.shape} incompatible with batch {n}")
        elif c.shape[0] == 1 and n != 1:
            c = np.broadcast_to(c, (n, c.shape[1]))
    if width is not None and c.shape[1] != width:
        raise DimensionError(f"{name} has width {c.shape[1]}, expected {width}")
    return c


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValidationError(f"{name} must be a finite real, got {value!r}")
    if value < 0 or (strict and value == 0):
        raise ValidationError(f"{name} must be {'positive' if strict else 'nonnegative'}, got {value!r}")
    return float(value)


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_finite(arr, what, step=None):
    if not np.all(np.isfinite(arr)):
        raise NumericDivergenceError(f"non-finite {what}", step=step)
    return arr


def check_random_state(rng):
    """Accept a Generator, a seed, or None; never touch global state."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(rng)
    raise ValidationError(f"cannot build a Generator from {rng!r}")
