"""Input validation helpers shared by the estimator, world, and harness layers.

These mirror sklearn's ``check_array`` conventions for the 4-d clip arrays
this package works with (sklearn's own helper only handles 2-d without
``allow_nd``, and we want shape-aware error messages).
"""

from __future__ import annotations

import numpy as np


def check_clips_array(X, *, frames=None, tokens=None, dim=None, name="X"):
    """Validate a clip batch of shape (n_clips, frames, tokens, dim).

    Returns the array as contiguous float64. Raises ValueError on wrong
    dimensionality, zero-size axes, non-finite values, or a mismatch with
    any of the expected axis sizes.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(
            f"{name} must have shape (n_clips, frames, tokens, dim); got ndim={X.ndim}"
        )
    if min(X.shape) == 0:
        raise ValueError(f"{name} has a zero-sized axis: shape={X.shape}")
    for axis, expected, label in ((1, frames, "frames"), (2, tokens, "tokens"), (3, dim, "dim")):
        if expected is not None and X.shape[axis] != expected:
            raise ValueError(
                f"{name} has {X.shape[axis]} {label}, expected {expected}"
            )
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X)


def check_labels(y, n_samples, *, n_classes=None, name="y"):
    """Validate an integer label vector aligned with ``n_samples``."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"{name} must be a 1-d array of length {n_samples}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValueError(f"{name} must contain integer labels")
        y = y.astype(np.int64)
    else:
        y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError(f"{name} contains negative labels")
    if n_classes is not None and y.max() >= n_classes:
        raise ValueError(
            f"{name} contains label {y.max()} outside range [0, {n_classes})"
        )
    return y


def check_text_array(T, n_samples, *, dim=None, name="texts"):
    """Validate per-clip text triplets of shape (n_clips, 3, text_dim)."""
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 3 or T.shape[0] != n_samples or T.shape[1] != 3:
        raise ValueError(
            f"{name} must have shape ({n_samples}, 3, text_dim); got {T.shape}"
        )
    if dim is not None and T.shape[2] != dim:
        raise ValueError(f"{name} has text_dim={T.shape[2]}, expected {dim}")
    if not np.isfinite(T).all():
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(T)


def check_vector(v, *, dim=None, name="vector"):
    """Validate a finite 1-d vector, optionally of fixed dimension."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} has dimension {v.shape[0]}, expected {dim}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite values")
    return v
