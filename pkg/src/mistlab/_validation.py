"""Input validation shared by the estimators."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ShapeError


def check_batch(X, input_shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape (n, *input_shape)."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False, ensure_all_finite=True)
    if X.ndim < 2:
        raise ShapeError(f"expected a batch with at least 2 dimensions, got shape {X.shape}")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ShapeError(f"batch shape {X.shape[1:]} does not match input shape {tuple(input_shape)}")
    return X


def check_labels(y, n_samples: int, n_classes: Optional[int] = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ShapeError(f"expected {n_samples} labels, got shape {y.shape}")
    if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
        raise ValueError("labels must be integers")
    y = y.astype(np.intp)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ValueError(f"label {y.max()} outside [0, {n_classes})")
    return y


def check_xy(X, y, input_shape=None, n_classes=None) -> Tuple[np.ndarray, np.ndarray]:
    X = check_batch(X, input_shape)
    return X, check_labels(y, X.shape[0], n_classes)
