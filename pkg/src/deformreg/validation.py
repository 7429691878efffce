"""Input validation helpers shared across the public API.

All registration code indexes arrays as (depth, height, width) = (z, y, x)
and measures displacements in voxel units of the target grid. The checkers
here normalise dtypes, enforce shape contracts and raise ``ValueError`` with
messages that name the offending argument, so estimator-style callers get
sklearn-like feedback.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_volume_array",
    "check_field_array",
    "check_label_array",
    "check_spacing",
    "check_affine_parts",
]


def check_volume_array(data, name: str = "volume", min_size: int = 2) -> np.ndarray:
    """Validate a 3D scalar intensity array and return it as float32/float64."""
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 3D array, got ndim={arr.ndim}")
    if min(arr.shape) < min_size:
        raise ValueError(
            f"{name} must have every dimension >= {min_size}, got shape {arr.shape}"
        )
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_field_array(vectors, shape=None, name: str = "field") -> np.ndarray:
    """Validate a (3, D, H, W) displacement array, optionally against a grid shape."""
    arr = np.asarray(vectors)
    if arr.ndim != 4 or arr.shape[0] != 3:
        raise ValueError(
            f"{name} must have shape (3, D, H, W), got {arr.shape}"
        )
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise ValueError(
            f"{name} grid {arr.shape[1:]} does not match expected shape {tuple(shape)}"
        )
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_label_array(labels, shape=None, name: str = "labels") -> np.ndarray:
    """Validate a 3D non-negative integer label array."""
    arr = np.asarray(labels)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 3D array, got ndim={arr.ndim}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ValueError(
            f"{name} shape {arr.shape} does not match expected shape {tuple(shape)}"
        )
    if np.issubdtype(arr.dtype, np.floating):
        rounded = np.rint(arr)
        if not np.allclose(arr, rounded):
            raise ValueError(f"{name} must be integer-valued")
        arr = rounded
    arr = arr.astype(np.int32)
    if arr.min() < 0:
        raise ValueError(f"{name} must be non-negative (0 = background)")
    return arr


def check_spacing(spacing, name: str = "spacing") -> tuple[float, float, float]:
    """Validate a 3-vector of positive physical voxel sizes (mm)."""
    s = tuple(float(v) for v in np.asarray(spacing).ravel())
    if len(s) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(s)}")
    if any(v <= 0 or not np.isfinite(v) for v in s):
        raise ValueError(f"{name} components must be positive and finite, got {s}")
    return s


def check_affine_parts(linear, translation) -> tuple[np.ndarray, np.ndarray]:
    """Validate the (3, 3) linear part and 3-vector translation of an affine map."""
    lin = np.asarray(linear, dtype=np.float64)
    trans = np.asarray(translation, dtype=np.float64).ravel()
    if lin.shape != (3, 3):
        raise ValueError(f"affine linear part must be 3x3, got {lin.shape}")
    if trans.shape != (3,):
        raise ValueError(f"affine translation must be a 3-vector, got {trans.shape}")
    if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(trans))):
        raise ValueError("affine parameters contain non-finite values")
    if abs(np.linalg.det(lin)) < 1e-12:
        raise ValueError("affine linear part is singular")
    return lin, trans
