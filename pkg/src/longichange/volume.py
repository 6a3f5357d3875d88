"""Volume containers and the basic preprocessing operations on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

ROLES = ("intensity", "probability", "binary_mask", "label_map")


class VolumeError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    """A 3D scalar field of shape (H, W, D) with per-axis spacing in mm.

    The array is copied on construction and marked read-only, so a Volume
    can be shared freely.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    role: str = "intensity"

    def __post_init__(self):
        arr = np.array(self.data, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeError(f"expected a non-empty 3D array, got shape {arr.shape}")
        if self.role not in ROLES:
            raise VolumeError(f"unknown role {self.role!r}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        if self.role == "probability":
            if arr.size and (np.nanmin(arr) < 0 or np.nanmax(arr) > 1):
                raise VolumeError("probability volume has values outside [0, 1]")
        elif self.role == "binary_mask":
            if not np.isin(arr, (0, 1)).all():
                raise VolumeError("binary mask has values other than 0 and 1")
            arr = arr.astype(np.uint8)
        elif self.role == "label_map":
            if arr.size and (arr.min() < 0 or not np.all(np.equal(np.mod(arr, 1), 0))):
                raise VolumeError("label map must hold nonnegative integers")
            arr = arr.astype(np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def replace(self, data=None, spacing=None, role=None) -> "Volume":
        return Volume(
            self.data if data is None else data,
            self.spacing if spacing is None else spacing,
            self.role if role is None else role,
        )


@dataclass(frozen=True)
class ScanPair:
    """Two co-registered scans of one subject, optionally with a change mask."""

    baseline: Volume
    followup: Volume
    subject_id: str = ""
    change_mask: Optional[Volume] = None
    label: str = field(default="")

    def __post_init__(self):
        label = self.label or ("Change" if self.change_mask is not None else "NoChange")
        object.__setattr__(self, "label", label)
        if label not in ("Change", "NoChange"):
            raise VolumeError(f"label must be Change or NoChange, got {label!r}")
        if self.baseline.shape != self.followup.shape:
            raise VolumeError(
                f"baseline {self.baseline.shape} and followup {self.followup.shape} differ in shape")
        if not np.allclose(self.baseline.spacing, self.followup.spacing):
            raise VolumeError("baseline and followup differ in spacing")
        if label == "Change":
            if self.change_mask is None:
                raise VolumeError("a Change pair needs a change mask")
            if self.change_mask.shape != self.baseline.shape:
                raise VolumeError("change mask shape does not match the scans")
            if self.change_mask.role != "binary_mask":
                raise VolumeError("change mask must have role binary_mask")
        elif self.change_mask is not None:
            raise VolumeError("a NoChange pair cannot carry a change mask")


def normalize_intensity(v: Volume, p_low: float = 0.0, p_high: float = 99.0) -> Volume:
    """Map the [p_low, p_high] percentile range of foreground voxels to [0, 1].

    Percentiles are taken over nonzero voxels only; the result is clamped.
    """
    if not p_low < p_high:
        raise VolumeError("p_low must be below p_high")
    data = v.data.astype(np.float64)
    fg = data[data != 0]
    if fg.size == 0:
        raise VolumeError("degenerate intensity range")
    q_low, q_high = np.percentile(fg, [p_low, p_high])
    if q_high == q_low:
        raise VolumeError("degenerate intensity range")
    out = np.clip((data - q_low) / (q_high - q_low), 0.0, 1.0)
    return v.replace(data=out.astype(np.float32), role="intensity")


def resample_isotropic(v: Volume, target_mm: float = 1.0) -> Volume:
    """Resample to cubic voxels of side ``target_mm``.

    Intensity and probability volumes use trilinear interpolation; masks and
    label maps use nearest neighbour. The grid is aligned so that the first and
    last voxel centres map onto each other.
    """
    if target_mm <= 0:
        raise VolumeError("target_mm must be positive")
    spacing = np.asarray(v.spacing)
    new_shape = tuple(
        max(1, int(round(n * s / target_mm))) for n, s in zip(v.shape, spacing))
    if new_shape == v.shape and np.allclose(spacing, target_mm):
        return v.replace(spacing=(target_mm,) * 3)
    order = 0 if v.role in ("binary_mask", "label_map") else 1
    zoom = [m / n for m, n in zip(new_shape, v.shape)]
    data = v.data if order == 0 else v.data.astype(np.float64)
    out = ndimage.zoom(data, zoom, order=order, mode="nearest", grid_mode=False)
    if out.shape != new_shape:
        raise VolumeError(f"resampling produced {out.shape}, expected {new_shape}")
    if order == 1:
        out = out.astype(np.float32)
        if v.role == "probability":
            out = np.clip(out, 0.0, 1.0)
    return v.replace(data=out, spacing=(target_mm,) * 3)


def abs_difference(a: Volume, b: Volume) -> Volume:
    if a.shape != b.shape:
        raise VolumeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not np.allclose(a.spacing, b.spacing):
        raise VolumeError("spacing mismatch")
    diff = np.abs(a.data.astype(np.float32) - b.data.astype(np.float32))
    return Volume(diff, a.spacing, "intensity")


def crop(v: Volume, origin: Sequence[int], shape: Sequence[int]) -> Volume:
    sl = tuple(slice(o, o + s) for o, s in zip(origin, shape))
    return v.replace(data=v.data[sl])


def random_crop_pair(p: ScanPair, crop_shape: Sequence[int], rng: np.random.Generator) -> ScanPair:
    """Crop baseline, followup and mask with one window drawn uniformly."""
    crop_shape = tuple(int(c) for c in crop_shape)
    shape = p.baseline.shape
    if len(crop_shape) != 3 or any(c < 1 or c > n for c, n in zip(crop_shape, shape)):
        raise VolumeError(f"crop {crop_shape} does not fit inside volume {shape}")
    origin = tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(shape, crop_shape))
    mask = None if p.change_mask is None else crop(p.change_mask, origin, crop_shape)
    return ScanPair(
        crop(p.baseline, origin, crop_shape),
        crop(p.followup, origin, crop_shape),
        p.subject_id,
        mask,
        p.label,
    )
