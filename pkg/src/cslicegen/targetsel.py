"""Choosing each subject's target slice: score matching, NMI registration, local refinement."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, DataError, ShapeError
from .metrics import NMI_BINS, nmi
from .preprocess import SliceImage, as_pixels, window_hu

METHODS = ("bpr", "registration", "semi_bpr")


@dataclass(frozen=True)
class TargetSelection:
    subject_id: str
    method: str
    slice_index: int
    score: float
    reference_id: str = ""


@dataclass(frozen=True)
class TranslationSearchSpec:
    radius: int = 8
    step: int = 2


def select_target_bpr(scores, reference_score: float, subject_id="",
                      reference_id="") -> TargetSelection:
    """Slice whose score is nearest ``reference_score``; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise DataError("empty score vector")
    if not np.all(np.isfinite(s)):
        raise DataError("non-finite anatomy scores")
    dist = np.abs(s - float(reference_score))
    idx = int(np.argmin(dist))  # argmin returns the first minimum
    return TargetSelection(subject_id, "bpr", idx, float(dist[idx]), reference_id)


def translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer shift with zero fill: out[y, x] = img[y - dy, x - dx]."""
    h, w = img.shape
    out = np.zeros_like(img)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def _normalized_slices(volume) -> np.ndarray:
    vox = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)
    if hasattr(volume, "voxels"):
        return window_hu(vox).astype(np.float32)
    return vox.astype(np.float32)


def shift_grid(search: TranslationSearchSpec):
    offs = range(-search.radius, search.radius + 1, search.step)
    offs = sorted(set(offs) | {0})
    return [(dy, dx) for dy in offs for dx in offs]


def best_translation(moving: np.ndarray, reference: np.ndarray, search: TranslationSearchSpec,
                     bins=NMI_BINS):
    """(best NMI, (dy, dx)) over the exhaustive shift grid; ties keep the earliest shift."""
    best, arg = -1.0, (0, 0)
    for dy, dx in shift_grid(search):
        v = nmi(translate(moving, dy, dx), reference, bins)
        if v > best:
            best, arg = v, (dy, dx)
    return best, arg


def select_target_registration(volume, reference_slice, search=TranslationSearchSpec(),
                               subject_id=None, reference_id="") -> TargetSelection:
    """Slice with the highest post-translation NMI against the reference slice."""
    ref = np.asarray(as_pixels(reference_slice), dtype=np.float32)
    if isinstance(reference_slice, SliceImage) and reference_slice.units != "normalized01":
        raise DataError("reference slice must be normalized")
    slices = _normalized_slices(volume)
    if slices.shape[1:] != ref.shape:
        raise ShapeError(f"reference {ref.shape} vs volume slices {slices.shape[1:]}")
    if search.radius < 0 or search.step < 1:
        raise ConfigError("search", "radius must be >= 0 and step >= 1")
    if search.radius >= min(ref.shape):
        raise ConfigError("search.radius", f"{search.radius} >= image size {min(ref.shape)}")
    scores = [best_translation(s, ref, search)[0] for s in slices]
    idx = int(np.argmax(scores))
    sid = subject_id if subject_id is not None else getattr(volume, "subject_id", "")
    return TargetSelection(sid, "registration", idx, float(scores[idx]), reference_id)


def refine_target_semi_bpr(volume, initial_index: int, reference_slice, radius: int = 8,
                           subject_id=None, reference_id="") -> TargetSelection:
    """Re-pick the target among slices within ``radius`` of ``initial_index`` by NMI."""
    if radius < 0:
        raise ConfigError("radius", "must be >= 0")
    slices = _normalized_slices(volume)
    n = slices.shape[0]
    if not 0 <= initial_index < n:
        raise DataError(f"initial_index {initial_index} outside 0..{n - 1}")
    ref = np.asarray(as_pixels(reference_slice), dtype=np.float32)
    if slices.shape[1:] != ref.shape:
        raise ShapeError(f"reference {ref.shape} vs volume slices {slices.shape[1:]}")
    lo, hi = max(0, initial_index - radius), min(n - 1, initial_index + radius)
    best_idx, best = initial_index, -1.0
    # Visit candidates by distance from the initial index so ties favour it.
    for i in sorted(range(lo, hi + 1), key=lambda j: (abs(j - initial_index), j)):
        v = nmi(slices[i], ref)
        if v > best:
            best_idx, best = i, v
    sid = subject_id if subject_id is not None else getattr(volume, "subject_id", "")
    return TargetSelection(sid, "semi_bpr", best_idx, float(best), reference_id)


def write_manifest(path, selections) -> Path:
    io.write_tsv(path, ["subject_id", "method", "slice_index", "score", "reference_id"],
                 [[s.subject_id, s.method, s.slice_index, s.score, s.reference_id]
                  for s in selections])
    return Path(path)


def read_manifest(path) -> dict[str, TargetSelection]:
    out = {}
    for row in io.read_tsv(path):
        out[row["subject_id"]] = TargetSelection(row["subject_id"], row["method"],
                                                 int(row["slice_index"]), float(row["score"]),
                                                 row.get("reference_id", ""))
    return out
