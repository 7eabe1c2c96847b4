"""Input validation helpers shared by the estimators and functional APIs."""
from __future__ import annotations

import math

import numpy as np

from .exceptions import ShapeError, ValidationError


def check_images(X, side=None, name="X"):
    """Return images as a float64 ``(N, side*side)`` matrix.

    Accepts ``(N, H, W)`` stacks with ``H == W`` or already flattened
    ``(N, P)`` matrices with ``P`` a perfect square. A single ``(H, W)``
    image is not accepted; wrap it in a batch first.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        if X.shape[1] != X.shape[2]:
            raise ShapeError(f"{name}: images must be square, got {X.shape[1:]}")
        X = X.reshape(X.shape[0], -1)
    elif X.ndim != 2:
        raise ShapeError(f"{name}: expected (N, H, W) or (N, P) array, got ndim={X.ndim}")
    n_pix = X.shape[1]
    root = math.isqrt(n_pix)
    if root * root != n_pix:
        raise ShapeError(f"{name}: {n_pix} pixels per image is not a square image")
    if side is not None and root != side:
        raise ShapeError(f"{name}: expected {side}x{side} images, got {root}x{root}")
    if X.shape[0] == 0:
        raise ValidationError(f"{name}: empty image batch")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name}: non-finite pixel values")
    return X


def check_labels(y, n_samples, n_classes=2, name="y"):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ShapeError(f"{name}: expected {n_samples} labels, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValidationError(f"{name}: labels must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValidationError(f"{name}: labels must lie in [0, {n_classes})")
    return y


def check_codes(F, code_len=None, name="codes"):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[None, :]
    if F.ndim != 2:
        raise ShapeError(f"{name}: expected (N, M) array, got ndim={F.ndim}")
    if code_len is not None and F.shape[1] != code_len:
        raise ShapeError(f"{name}: expected code length {code_len}, got {F.shape[1]}")
    if not np.all(np.isfinite(F)):
        raise ValidationError(f"{name}: non-finite values")
    return F
