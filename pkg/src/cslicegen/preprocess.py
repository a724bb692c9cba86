"""HU windowing, resampling and paired spatial augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import DataError, ShapeError

WINDOW_HU = (-125.0, 275.0)
RAW_SIZE = 512
MODEL_SIZE = 256
VALID_SIZES = (256, 512)

# Augmentation magnitudes: shift as a fraction of the image extent, rotation in degrees.
MAX_SHIFT_FRACTION = 0.10
MAX_ROTATION_DEG = 10.0
AUGMENT_PROBABILITY = 0.5


@dataclass
class SliceImage:
    pixels: np.ndarray
    units: str = "normalized01"  # or "raw_hu"
    subject_id: str = ""
    visit_index: int = 0
    z_mm: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels, **changes) -> "SliceImage":
        return replace(self, pixels=pixels, **changes)


def as_pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, SliceImage) else np.asarray(img)


def window_hu(hu, window=WINDOW_HU) -> np.ndarray:
    """Map HU values to [0, 1] through the soft-tissue window."""
    lo, hi = window
    hu = np.asarray(hu, dtype=np.float64)
    if not np.all(np.isfinite(hu)):
        raise DataError("non-finite pixel values")
    return np.clip((hu - lo) / (hi - lo), 0.0, 1.0)


def unwindow(values, window=WINDOW_HU) -> np.ndarray:
    lo, hi = window
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def window_and_rescale(img: SliceImage, window=WINDOW_HU) -> SliceImage:
    if img.units != "raw_hu":
        raise DataError(f"expected raw_hu input, got {img.units}")
    out = window_hu(img.pixels, window).astype(np.float32)
    return img.with_pixels(out, units="normalized01")


def resize_array(pixels: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resampling of a square 2D array (antialiased when shrinking)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1]:
        raise ShapeError(f"expected a square 2D image, got shape {pixels.shape}")
    if pixels.shape[0] == target_size:
        return pixels.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=(target_size, target_size), mode="bilinear",
                        align_corners=False, antialias=target_size < pixels.shape[0])
    return out[0, 0].numpy()


def resize(img: SliceImage, target_size: int) -> SliceImage:
    if target_size not in VALID_SIZES:
        raise ShapeError(f"target_size must be one of {VALID_SIZES}, got {target_size}")
    out = resize_array(img.pixels, target_size)
    if img.units == "normalized01":
        out = np.clip(out, 0.0, 1.0)
    return img.with_pixels(out)


def to_model_input(img: SliceImage) -> SliceImage:
    """Raw or normalized slice of any valid size -> normalized 256x256."""
    if img.units == "raw_hu":
        img = window_and_rescale(img)
    return resize(img, MODEL_SIZE)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    shift: tuple[float, float] = (0.0, 0.0)  # (rows, cols) in pixels
    angle_deg: float = 0.0

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.shift == (0.0, 0.0) and self.angle_deg == 0.0


def sample_augmentation(rng: np.random.Generator, size: int) -> AugmentParams:
    # Draw every variate unconditionally so the stream position never depends on outcomes.
    u = rng.random(3)
    shift = rng.uniform(-MAX_SHIFT_FRACTION, MAX_SHIFT_FRACTION, size=2) * size
    angle = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)
    return AugmentParams(
        flip=bool(u[0] < AUGMENT_PROBABILITY),
        shift=(float(shift[0]), float(shift[1])) if u[1] < AUGMENT_PROBABILITY else (0.0, 0.0),
        angle_deg=float(angle) if u[2] < AUGMENT_PROBABILITY else 0.0,
    )


def apply_augmentation(pixels: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = np.asarray(pixels, dtype=np.float32)
    if params.flip:
        out = out[:, ::-1]
    if params.shift != (0.0, 0.0) or params.angle_deg != 0.0:
        theta = np.deg2rad(params.angle_deg)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        center = (np.array(out.shape) - 1) / 2.0
        # affine_transform maps output coords to input coords: in = R^T (out - c - s) + c
        inv = rot.T
        offset = center - inv @ (center + np.asarray(params.shift))
        out = ndimage.affine_transform(out, inv, offset=offset, order=1,
                                       mode="constant", cval=0.0)
    return np.clip(np.ascontiguousarray(out), 0.0, 1.0).astype(np.float32)


def augment_pair(cond: SliceImage, target: SliceImage, rng) -> tuple[SliceImage, SliceImage]:
    """Apply one sampled shift/rotation/flip to both images of a training pair."""
    if cond.pixels.shape != target.pixels.shape:
        raise ShapeError(f"pair size mismatch: {cond.pixels.shape} vs {target.pixels.shape}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = sample_augmentation(rng, cond.size)
    return (cond.with_pixels(apply_augmentation(cond.pixels, params)),
            target.with_pixels(apply_augmentation(target.pixels, params)))
