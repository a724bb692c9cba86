"""Longitudinal harmonization: regenerate every visit at the target level and
compare fat-area variability and within-subject similarity before and after."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, DataError, StateError
from .metrics import cv, nmi
from .model import ModelState, generate_batch
from .preprocess import RAW_SIZE, SliceImage, as_pixels, resize_array, to_model_input, window_hu
from .stats import SignedRankResult, wilcoxon_signed_rank

log = logging.getLogger(__name__)

FAT_BAND_HU = (-190.0, -30.0)
# The soft-tissue window clamps everything below -125 HU to 0, which is also where air
# lands, so the lower fat edge is raised just above the air floor.
AIR_FLOOR_HU = -120.0
DEFAULT_SPLIT_MM = 9.0
FAT_METHODS = ("threshold", "fuzzy_cmeans", "external_mask")


def fat_band_normalized() -> tuple[float, float]:
    lo = max(FAT_BAND_HU[0], AIR_FLOOR_HU)
    lo_n, hi_n = window_hu([lo, FAT_BAND_HU[1]])
    return float(lo_n), float(hi_n)


def body_floor_normalized() -> float:
    return float(window_hu(AIR_FLOOR_HU))


@dataclass
class FatAreaResult:
    area_mm2: float
    empty_body: bool = False


def fuzzy_cmeans_1d(values, n_clusters=2, m=2.0, tol=1e-5, max_iter=300, seed=0):
    """Fuzzy c-means on scalar intensities; returns (centroids, memberships[c, n])."""
    x = np.asarray(values, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    u = rng.random((n_clusters, x.size))
    u /= u.sum(axis=0, keepdims=True)
    centers = np.zeros(n_clusters)
    for _ in range(max_iter):
        um = u ** m
        centers = um @ x / um.sum(axis=1)
        d = np.abs(x[None, :] - centers[:, None])
        d = np.fmax(d, 1e-12)
        inv = d ** (-2.0 / (m - 1.0))
        u_new = inv / inv.sum(axis=0, keepdims=True)
        if np.max(np.abs(u_new - u)) < tol:
            u = u_new
            break
        u = u_new
    order = np.argsort(centers)
    return centers[order], u[order]


def fat_area(slice_img, method="threshold", pixel_spacing_mm=None, mask=None,
             fov_mm=400.0) -> FatAreaResult:
    """Fat-compartment area (mm^2) of a normalized slice.

    threshold: pixels inside the windowed fat band.  fuzzy_cmeans: two-cluster
    FCM over body pixels, fat = low-intensity cluster with membership >= 0.5.
    external_mask: count of a caller-supplied boolean mask.
    """
    pixels = np.asarray(slice_img.pixels if isinstance(slice_img, SliceImage) else slice_img,
                        dtype=np.float64)
    if isinstance(slice_img, SliceImage) and slice_img.units != "normalized01":
        raise DataError("fat_area expects a normalized slice")
    if pixel_spacing_mm is None:
        pixel_spacing_mm = fov_mm / pixels.shape[0]
    px_area = float(pixel_spacing_mm) ** 2
    if method == "external_mask":
        if mask is None:
            raise ConfigError("mask", "external_mask method needs a mask")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pixels.shape:
            raise DataError(f"mask shape {mask.shape} vs slice {pixels.shape}")
        return FatAreaResult(float(mask.sum()) * px_area)
    body = pixels > body_floor_normalized()
    if not body.any():
        warnings.warn("no body pixels found; fat area set to 0", RuntimeWarning, stacklevel=2)
        return FatAreaResult(0.0, empty_body=True)
    lo, hi = fat_band_normalized()
    if method == "threshold":
        fat = (pixels > lo) & (pixels <= hi)
        return FatAreaResult(float(fat.sum()) * px_area)
    if method == "fuzzy_cmeans":
        vals = pixels[body]
        if np.ptp(vals) == 0:
            return FatAreaResult(0.0)
        _, u = fuzzy_cmeans_1d(vals)
        return FatAreaResult(float((u[0] >= 0.5).sum()) * px_area)
    raise ConfigError("method", f"unknown fat-area method {method!r}")


@dataclass
class VisitResult:
    visit_index: int
    original: np.ndarray  # normalized, raw size
    harmonized: np.ndarray  # normalized, 512x512
    fat_area_original: float
    fat_area_harmonized: float
    true_z_offset_mm: float = 0.0


@dataclass
class HarmonizationResult:
    subject_id: str
    visits: list[VisitResult]
    cv_original: float
    cv_harmonized: float
    pairwise_nmi_original: np.ndarray
    pairwise_nmi_harmonized: np.ndarray

    @property
    def jitter_span_mm(self) -> float:
        return float(np.ptp([v.true_z_offset_mm for v in self.visits]))


def _as_generator(model, seed):
    if isinstance(model, ModelState):
        if model.step == 0:
            raise StateError("model has not been trained")
        return lambda batch: generate_batch(model, batch, seed=seed)
    if callable(model):
        return lambda batch: np.stack([np.asarray(model(b)) for b in batch])
    raise StateError("no model supplied")


def harmonize_series(model, series, seed=0, method="threshold", fov_mm=400.0) -> HarmonizationResult:
    """Regenerate every visit of one subject at the target level and measure fat areas."""
    if len(series.visits) < 2:
        raise DataError(f"{series.subject_id}: need at least two visits")
    gen = _as_generator(model, seed)
    originals, inputs = [], []
    for v in series.visits:
        img = v.slice
        norm = img if img.units == "normalized01" else img.with_pixels(
            window_hu(img.pixels).astype(np.float32), units="normalized01")
        originals.append(norm.pixels)
        inputs.append(to_model_input(norm).pixels)
    generated = gen(np.stack(inputs))
    visits = []
    for v, orig, g in zip(series.visits, originals, generated):
        up = np.clip(resize_array(g, RAW_SIZE), 0.0, 1.0)
        visits.append(VisitResult(
            visit_index=v.visit_index, original=orig, harmonized=up,
            fat_area_original=fat_area(orig, method, fov_mm=fov_mm).area_mm2,
            fat_area_harmonized=fat_area(up, method, fov_mm=fov_mm).area_mm2,
            true_z_offset_mm=float(getattr(v, "true_z_offset_mm", 0.0))))
    fo = [v.fat_area_original for v in visits]
    fh = [v.fat_area_harmonized for v in visits]
    pairs = list(combinations(range(len(visits)), 2))
    return HarmonizationResult(
        subject_id=series.subject_id, visits=visits,
        cv_original=_safe_cv(fo), cv_harmonized=_safe_cv(fh),
        pairwise_nmi_original=np.array([nmi(visits[i].original, visits[j].original)
                                        for i, j in pairs]),
        pairwise_nmi_harmonized=np.array([nmi(visits[i].harmonized, visits[j].harmonized)
                                          for i, j in pairs]))


def _safe_cv(values):
    values = np.asarray(values, dtype=np.float64)
    return cv(values) if values.mean() > 0 else float("nan")


@dataclass
class CohortReport:
    rows: list = field(default_factory=list)  # (subject_id, high_jitter, cv_orig, cv_harm, reduction_pct)
    full: SignedRankResult | None = None
    high_jitter: SignedRankResult | None = None
    median_cv: dict = field(default_factory=dict)
    split_mm: float = DEFAULT_SPLIT_MM
    warnings: list = field(default_factory=list)

    COLUMNS = ("subject_id", "high_jitter", "cv_original", "cv_harmonized", "variance_reduction_pct")

    def summary(self) -> dict:
        def res(r):
            return None if r is None else {"statistic": r.statistic, "pvalue": r.pvalue,
                                           "n": r.n, "method": r.method}
        return {"split_mm": self.split_mm, "n_subjects": len(self.rows),
                "n_high_jitter": sum(1 for r in self.rows if r[1]),
                "median_cv": self.median_cv, "wilcoxon_full": res(self.full),
                "wilcoxon_high_jitter": res(self.high_jitter), "warnings": self.warnings}

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tsv = directory / "cohort_report.tsv"
        io.write_tsv(tsv, list(self.COLUMNS), self.rows)
        js = directory / "cohort_summary.json"
        js.write_text(io.canonical_json(self.summary()) + "\n")
        return [tsv, js]


def variance_reduction_pct(cv_original, cv_harmonized) -> float:
    """Percent drop of the across-visit variance (CV squared) after harmonization."""
    if not cv_original > 0:
        return 0.0
    return 100.0 * (1.0 - (cv_harmonized / cv_original) ** 2)


def cv_analysis(results, split_mm=DEFAULT_SPLIT_MM) -> CohortReport:
    """Paired CV comparison over the cohort and its high-jitter part."""
    report = CohortReport(split_mm=split_mm)
    kept = []
    for r in sorted(results, key=lambda r: r.subject_id):
        if len(r.visits) < 2 or not (np.isfinite(r.cv_original) and np.isfinite(r.cv_harmonized)):
            why = "fewer than 2 visits" if len(r.visits) < 2 else "CV undefined (zero mean fat area)"
            msg = f"{r.subject_id}: excluded ({why})"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            report.warnings.append(msg)
            continue
        kept.append(r)
        report.rows.append((r.subject_id, int(r.jitter_span_mm > split_mm), r.cv_original,
                            r.cv_harmonized, variance_reduction_pct(r.cv_original, r.cv_harmonized)))
    for name, subset in (("full", kept), ("high_jitter", [r for r in kept if r.jitter_span_mm > split_mm])):
        co = np.array([r.cv_original for r in subset])
        ch = np.array([r.cv_harmonized for r in subset])
        test = wilcoxon_signed_rank(ch, co) if len(subset) else None
        setattr(report, name, test)
        report.median_cv[name] = {
            "original": float(np.median(co)) if len(co) else float("nan"),
            "harmonized": float(np.median(ch)) if len(ch) else float("nan"), "n": len(subset)}
    return report


@dataclass
class NMIDistribution:
    original: np.ndarray
    harmonized: np.ndarray
    subject_ids: list
    collapse_warning: bool = False

    def summary(self) -> dict:
        return {"n_pairs": int(self.original.size),
                "mean_original": float(np.mean(self.original)) if self.original.size else None,
                "mean_harmonized": float(np.mean(self.harmonized)) if self.harmonized.size else None,
                "median_original": float(np.median(self.original)) if self.original.size else None,
                "median_harmonized": float(np.median(self.harmonized)) if self.harmonized.size else None,
                "collapse_warning": self.collapse_warning}


def pairwise_nmi_analysis(results, subset=None) -> NMIDistribution:
    """All within-subject visit-pair NMIs, original vs harmonized."""
    o, h, ids = [], [], []
    for r in sorted(results, key=lambda r: r.subject_id):
        if subset is not None and r.subject_id not in subset:
            continue
        o.extend(r.pairwise_nmi_original.tolist())
        h.extend(r.pairwise_nmi_harmonized.tolist())
        ids.extend([r.subject_id] * len(r.pairwise_nmi_original))
    h_arr = np.asarray(h)
    collapse = bool(h_arr.size and np.all(h_arr >= 1.0 - 1e-12))
    if collapse:
        warnings.warn("every harmonized pair is identical (NMI = 1): generator collapse?",
                      RuntimeWarning, stacklevel=2)
    return NMIDistribution(np.asarray(o), h_arr, ids, collapse)


def dump_grid(result: HarmonizationResult, path, reference=None) -> Path:
    """PNG panel, one row per visit: condition | generated | reference (if given)."""
    from PIL import Image

    rows = []
    for v in result.visits:
        cells = [resize_array(v.original, 256), resize_array(v.harmonized, 256)]
        if reference is not None:
            cells.append(resize_array(np.asarray(as_pixels(reference), dtype=np.float32), 256))
        rows.append(np.concatenate(cells, axis=1))
    grid = np.clip(np.concatenate(rows, axis=0), 0, 1)
    Image.fromarray((grid * 255).round().astype(np.uint8)).save(path)
    return Path(path)
