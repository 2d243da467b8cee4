"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def check_consistent_length(X, y):
    if len(X) != len(y):
        raise ShapeError(f"X has {len(X)} rows but y has {len(y)}")


def check_images(X) -> np.ndarray:
    """Validate a float image batch; [N, H, W] gains a channel axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None, :, :]
    if X.ndim != 4:
        raise ShapeError(f"image input must be [N, C, H, W] or [N, H, W], got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ShapeError("image input contains non-finite values")
    return X


def check_sequences(X, vocab: int | None = None) -> np.ndarray:
    """Validate an integer id batch [N, T]."""
    X = np.asarray(X)
    if not np.issubdtype(X.dtype, np.integer):
        raise ShapeError(f"sequence input must be integer ids, got dtype {X.dtype}")
    if X.ndim != 2:
        raise ShapeError(f"sequence input must be [N, T], got {X.shape}")
    if X.size and X.min() < 0:
        raise ShapeError("sequence ids must be nonnegative")
    if vocab is not None and X.size and X.max() >= vocab:
        raise ShapeError(f"sequence id {X.max()} outside vocabulary of {vocab}")
    return X


def check_targets(y, classification: bool) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"targets must be 1-d, got {y.shape}")
    if classification:
        if not np.issubdtype(y.dtype, np.integer):
            raise ShapeError("classification targets must be integer class ids")
        return y.astype(np.int32)
    return y.astype(np.float64)
