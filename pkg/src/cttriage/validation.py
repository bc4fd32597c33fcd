"""Input validation helpers used across the estimator surfaces."""

from __future__ import annotations

import numpy as np

HU_MIN = -32768
HU_MAX = 32767


def check_voxels(voxels: np.ndarray) -> np.ndarray:
    """Validate a 3D signed 16-bit voxel grid and return it as int16.

    Accepts any integer dtype whose values fit the signed 16-bit range.
    """
    arr = np.asarray(voxels)
    if arr.ndim != 3:
        raise ValueError(f"voxels must be 3D [n_slices, height, width], got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"voxel grid dimensions must all be >= 1, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"voxels must be integer Hounsfield units, got dtype {arr.dtype}")
    if arr.dtype != np.int16:
        if arr.min() < HU_MIN or arr.max() > HU_MAX:
            raise ValueError("voxel values exceed the signed 16-bit Hounsfield range")
        arr = arr.astype(np.int16)
    return arr


def check_slice_tensor(pixels: np.ndarray, size: int = 512) -> np.ndarray:
    """Validate a model-ready slice tensor: size x size x 3, values in [0, 255]."""
    arr = np.asarray(pixels)
    if arr.shape != (size, size, 3):
        raise ValueError(f"slice tensor must have shape ({size}, {size}, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("slice tensor contains non-finite values")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("slice tensor values must lie in [0, 255]")
    return arr


def check_probabilities(values: np.ndarray, n_classes: int = 3, tol: float = 1e-6) -> np.ndarray:
    """Validate a probability simplex vector of length n_classes."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (n_classes,):
        raise ValueError(f"expected {n_classes} class probabilities, got shape {np.shape(values)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("class probabilities contain non-finite values")
    if arr.min() < -tol or arr.max() > 1 + tol:
        raise ValueError("class probabilities must lie in [0, 1]")
    if abs(float(arr.sum()) - 1.0) > tol:
        raise ValueError(f"class probabilities must sum to 1 within {tol}, got {arr.sum()!r}")
    return arr
