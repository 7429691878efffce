"""Geometry substrate: volumes, displacement fields, affine maps, warping.

Conventions used throughout the package:

* Arrays are indexed ``(z, y, x)`` = ``(D, H, W)``; displacement component 0
  is the z-offset, component 1 the y-offset, component 2 the x-offset.
* Displacements are in voxel units of the grid the field lives on.
* Warping is pull-back sampling: ``warp(I, u)(p) = I(p + u(p))``.
* Samples outside the domain are border-clamped (edge extension), never
  zero-filled.

Everything here is a pure function of immutable numpy inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .validation import (
    check_affine_parts,
    check_field_array,
    check_label_array,
    check_spacing,
    check_volume_array,
)

__all__ = [
    "Volume",
    "DisplacementField",
    "AffineTransform",
    "LabelMap",
    "warp",
    "warp_array",
    "compose",
    "apply_affine_to_volume",
    "affine_to_field",
    "jacobian_determinant",
    "identity_coords",
]


@dataclass
class Volume:
    """A 3D scalar grid with physical voxel spacing (mm per voxel)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None  # verbatim NIfTI affine, never interpreted

    def __post_init__(self):
        self.data = check_volume_array(self.data)
        self.spacing = check_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class DisplacementField:
    """Per-voxel 3D offsets, shaped (3, D, H, W), in voxel units of its grid."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = check_field_array(self.vectors)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.vectors.shape[1:]

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "DisplacementField":
        return cls(np.zeros((3, *shape), dtype=dtype))


@dataclass
class LabelMap:
    """Integer segmentation labels on a volume grid; 0 is background."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = check_label_array(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass
class AffineTransform:
    """Affine map on voxel coordinates: x -> linear @ x + translation."""

    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.linear, self.translation = check_affine_parts(self.linear, self.translation)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3))

    @property
    def is_identity(self) -> bool:
        return np.array_equal(self.linear, np.eye(3)) and not self.translation.any()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points of shape (3, ...) through the affine."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.einsum("ij,j...->i...", self.linear, pts)
        return out + self.translation.reshape(3, *([1] * (pts.ndim - 1)))

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation)


def identity_coords(shape, dtype=np.float32) -> np.ndarray:
    """Voxel-index coordinate grid of shape (3, D, H, W)."""
    axes = [np.arange(n, dtype=dtype) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=0)


def _sample(data: np.ndarray, coords: np.ndarray, interpolation: str) -> np.ndarray:
    """Sample ``data`` at fractional coordinates with border-clamp extension."""
    if interpolation == "trilinear":
        order = 1
    elif interpolation == "nearest":
        order = 0
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    # mode='nearest' extends the image by its edge values, which for order<=1
    # is exactly coordinate clamping.
    return map_coordinates(data, coords, order=order, mode="nearest")


def warp_array(data: np.ndarray, vectors: np.ndarray, interpolation: str = "trilinear") -> np.ndarray:
    """Array-level warp: ``out[p] = data[p + vectors[p]]`` with border clamp."""
    if data.shape != vectors.shape[1:]:
        raise ValueError(
            f"field grid {vectors.shape[1:]} does not match image shape {data.shape}"
        )
    coords = identity_coords(data.shape, dtype=vectors.dtype) + vectors
    return _sample(data, coords, interpolation)


def warp(image, field: DisplacementField, interpolation: str = "trilinear"):
    """Warp a Volume or LabelMap by a displacement field (pull-back sampling).

    ``out(p) = image(p + field(p))``. Label maps are always resampled with
    nearest-neighbor interpolation regardless of the argument.
    """
    if isinstance(image, LabelMap):
        warped = warp_array(image.labels.astype(np.float32), field.vectors, "nearest")
        return LabelMap(warped.astype(np.int32))
    if isinstance(image, Volume):
        return Volume(
            warp_array(image.data, field.vectors, interpolation),
            spacing=image.spacing,
            affine=image.affine,
        )
    return warp_array(np.asarray(image), field.vectors, interpolation)


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Combine two fields so one warp equals warping by ``outer`` then ``inner``.

    ``result(p) = inner(p) + outer(p + inner(p))`` with trilinear sampling of
    ``outer``; satisfies ``warp(warp(I, outer), inner) ~= warp(I, result)``.
    """
    if outer.shape != inner.shape:
        raise ValueError(f"field shapes differ: {outer.shape} vs {inner.shape}")
    coords = identity_coords(inner.shape, dtype=inner.vectors.dtype) + inner.vectors
    sampled = np.stack(
        [_sample(outer.vectors[c], coords, "trilinear") for c in range(3)], axis=0
    )
    return DisplacementField(inner.vectors + sampled)


def apply_affine_to_volume(image, transform: AffineTransform, interpolation: str = "trilinear"):
    """Resample with pull-back convention: ``out(q) = image(linear @ q + translation)``."""
    if isinstance(image, LabelMap):
        coords = transform.apply(identity_coords(image.shape))
        return LabelMap(_sample(image.labels.astype(np.float32), coords, "nearest").astype(np.int32))
    if isinstance(image, Volume):
        if transform.is_identity:
            return Volume(image.data.copy(), spacing=image.spacing, affine=image.affine)
        coords = transform.apply(identity_coords(image.shape))
        return Volume(
            _sample(image.data, coords, interpolation).astype(image.data.dtype, copy=False),
            spacing=image.spacing,
            affine=image.affine,
        )
    arr = np.asarray(image)
    coords = transform.apply(identity_coords(arr.shape))
    return _sample(arr, coords, interpolation).astype(arr.dtype, copy=False)


def affine_to_field(transform: AffineTransform, shape) -> DisplacementField:
    """Displacement-field form of an affine map: ``field(p) = T(p) - p``."""
    coords = identity_coords(shape, dtype=np.float64)
    return DisplacementField((transform.apply(coords) - coords).astype(np.float32))


def jacobian_determinant(field: DisplacementField) -> np.ndarray:
    """Per-voxel determinant of the deformation Jacobian of ``phi(p) = p + u(p)``.

    Central differences interior, one-sided at boundaries (np.gradient
    stencil); exact for fields affine in p. Non-positive values are legal
    output and signal folding.
    """
    if min(field.shape) < 3:
        raise ValueError(f"jacobian needs >= 3 voxels per axis, got {field.shape}")
    u = field.vectors.astype(np.float64)
    # rows of J: d(phi_i)/d(p_j); phi = identity + u, so J = I + grad(u)
    g = np.empty((3, 3, *field.shape), dtype=np.float64)
    for i in range(3):
        grads = np.gradient(u[i], axis=(0, 1, 2))
        for j in range(3):
            g[i, j] = grads[j]
            if i == j:
                g[i, j] += 1.0
    det = (
        g[0, 0] * (g[1, 1] * g[2, 2] - g[1, 2] * g[2, 1])
        - g[0, 1] * (g[1, 0] * g[2, 2] - g[1, 2] * g[2, 0])
        + g[0, 2] * (g[1, 0] * g[2, 1] - g[1, 1] * g[2, 0])
    )
    return det
