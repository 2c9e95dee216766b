"""Input validation helpers used by the estimators and module functions."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteValue, ShapeMismatch


def as_float_array(x, name="array", ndim=None, require_finite=True):
    """Coerce to a float64 ndarray, optionally pinning rank and finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeMismatch(f"{name}: expected {ndim}-d array, got {arr.ndim}-d")
    if require_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or infinite values")
    return arr


def check_raster_stack(x, name="rasters", bands=None):
    """Validate a (N, B, H, W) raster stack and return it as float64."""
    arr = as_float_array(x, name=name, ndim=4)
    if bands is not None and arr.shape[1] != bands:
        raise ShapeMismatch(
            f"{name}: expected {bands} bands, got {arr.shape[1]}"
        )
    return arr


def check_pixel_matrix(x, name="pixels", bands=None):
    """Validate a (n, B) matrix of per-pixel band vectors."""
    arr = as_float_array(x, name=name, ndim=2)
    if bands is not None and arr.shape[1] != bands:
        raise ShapeMismatch(
            f"{name}: expected {bands} columns, got {arr.shape[1]}"
        )
    return arr


def check_multihot(y, name="labels"):
    """Validate a (N, C) multi-hot matrix; entries must be exactly 0 or 1."""
    arr = np.asarray(y)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name}: expected 2-d array, got {arr.ndim}-d")
    vals = np.asarray(arr, dtype=np.float64)
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise ShapeMismatch(f"{name}: entries must be exactly 0 or 1")
    return vals


def check_same_shape(a, b, name_a="a", name_b="b"):
    if a.shape != b.shape:
        raise ShapeMismatch(
            f"{name_a} has shape {a.shape} but {name_b} has shape {b.shape}"
        )


def flatten_rasters(x):
    """Flatten (N, B, H, W) to (N, B*H*W); pass 2-d input through as float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0], -1)
    if arr.ndim == 2:
        return arr
    raise ShapeMismatch(f"expected 2-d or 4-d input, got {arr.ndim}-d")
