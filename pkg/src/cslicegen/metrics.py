"""Image similarity (SSIM, PSNR, LPIPS-style, NMI) and cohort variability (CV)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import io
from .errors import DataError, ShapeError

NMI_BINS = 64
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
TABLE_COLUMNS = ("SSIM", "PSNR", "LPIPS", "NMI")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, data_range=1.0) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"images smaller than the {SSIM_WINDOW}px SSIM window")
    g = gaussian_window()
    half = SSIM_WINDOW // 2

    def filt(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="constant")
        x = ndimage.correlate1d(x, g, axis=1, mode="constant")
        return x[half:-half, half:-half]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a, b, peak=1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def _bin_index(x, bins):
    return np.clip((np.asarray(x, dtype=np.float64) * bins).astype(np.int64), 0, bins - 1)


def joint_histogram(a, b, bins=NMI_BINS) -> np.ndarray:
    a, b = _pair(a, b)
    ia, ib = _bin_index(a.ravel(), bins), _bin_index(b.ravel(), bins)
    return np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)


def _entropy(p):
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def nmi(a, b, bins=NMI_BINS) -> float:
    """2 I(A;B) / (H(A) + H(B)) on fixed-width bins over [0, 1].

    Two constant images return 1 if they fall in the same bin and 0 otherwise.
    """
    joint = joint_histogram(a, b, bins).astype(np.float64)
    p = joint / joint.sum()
    ha, hb = _entropy(p.sum(axis=1)), _entropy(p.sum(axis=0))
    if ha + hb == 0.0:
        (i, j), = np.argwhere(joint)
        return 1.0 if i == j else 0.0
    mi = ha + hb - _entropy(p.ravel())
    return float(np.clip(2.0 * mi / (ha + hb), 0.0, 1.0))


def cv(series) -> float:
    """Coefficient of variation with the population standard deviation."""
    x = np.asarray(series, dtype=np.float64)
    if x.size < 2:
        raise DataError("cv needs at least two values")
    mu = x.mean()
    if not mu > 0:
        raise ValueError(f"cv undefined for non-positive mean ({mu})")
    return float(x.std(ddof=0) / mu)


def mean_gradient_magnitude(img) -> float:
    gy, gx = np.gradient(np.asarray(img, dtype=np.float64))
    return float(np.mean(np.hypot(gx, gy)))


class FeatureExtractor:
    """Fixed multi-layer conv stack used for the perceptual distance.

    The default weights are drawn from a seeded generator so the distance is
    reproducible without shipping pretrained perceptual weights; ``extractor_id``
    travels with every report so values from different stacks are never mixed.
    """

    def __init__(self, weights=None, seed=0, widths=(8, 16, 32)):
        if weights is None:
            g = torch.Generator().manual_seed(seed)
            weights, c = [], 1
            for w in widths:
                k = torch.randn(w, c, 3, 3, generator=g, dtype=torch.float64)
                weights.append(k / math.sqrt(c * 9))
                c = w
            self.extractor_id = f"seeded-conv-{'x'.join(map(str, widths))}-s{seed}"
        else:
            weights = [torch.as_tensor(np.asarray(w), dtype=torch.float64) for w in weights]
            self.extractor_id = "external-" + io.fingerprint(
                [np.asarray(w).round(8).tolist() for w in weights])
        self.weights = weights

    @classmethod
    def from_file(cls, path):
        """Load external weights from a container file holding ``layer0``, ``layer1``..."""
        _, arrays = io.read_container(path)
        keys = sorted(arrays, key=lambda k: int(k.replace("layer", "")))
        return cls(weights=[arrays[k] for k in keys])

    def features(self, img):
        x = torch.as_tensor(np.asarray(img, dtype=np.float64))[None, None] * 2.0 - 1.0
        feats = []
        for w in self.weights:
            x = F.relu(F.conv2d(x, w, stride=2, padding=1))
            feats.append(x)
        return feats


_DEFAULT_EXTRACTOR = None


def default_extractor() -> FeatureExtractor:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = FeatureExtractor()
    return _DEFAULT_EXTRACTOR


def lpips(a, b, features: FeatureExtractor | None = None) -> float:
    """Channel-normalized feature distance, spatially averaged and summed over layers."""
    a, b = _pair(a, b)
    features = features or default_extractor()
    total = 0.0
    with torch.no_grad():
        for fa, fb in zip(features.features(a), features.features(b)):
            na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
            nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
            total += float(((na - nb) ** 2).sum(dim=1).mean())
    return total


# reports ------------------------------------------------------------------------

@dataclass
class EvalItem:
    subject_id: str
    condition: np.ndarray
    target: np.ndarray


@dataclass
class MetricsReport:
    rows: list[tuple[str, str, float]] = field(default_factory=list)
    bins: int = NMI_BINS
    ssim_window: int = SSIM_WINDOW
    extractor_id: str = ""

    @property
    def config_fingerprint(self) -> dict:
        return {"nmi_bins": self.bins, "ssim_window": self.ssim_window,
                "ssim_sigma": SSIM_SIGMA, "extractor_id": self.extractor_id}

    def values(self, metric) -> np.ndarray:
        return np.array([v for _, m, v in self.rows if m == metric], dtype=np.float64)

    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for m in TABLE_COLUMNS:
            v = self.values(m)
            if v.size:
                with np.errstate(invalid="ignore"):  # inf PSNR rows give a nan spread
                    out[m] = {"mean": float(np.mean(v)), "std": float(np.std(v))}
        return out

    def check_comparable(self, other: "MetricsReport") -> None:
        if self.config_fingerprint != other.config_fingerprint:
            raise ValueError("reports computed with different metric configurations "
                             f"({self.config_fingerprint} vs {other.config_fingerprint})")

    def table(self, label="model") -> str:
        agg = self.aggregates()
        head = f"{'Method':<24}" + "".join(f"{c:>10}" for c in TABLE_COLUMNS)
        cells = "".join(f"{agg[c]['mean']:>10.3f}" if c in agg else f"{'-':>10}"
                        for c in TABLE_COLUMNS)
        return head + "\n" + f"{label:<24}" + cells

    def write(self, directory, label="model") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tsv = directory / "metrics.tsv"
        io.write_tsv(tsv, ["subject_id", "metric", "value"], self.rows)
        summary = directory / "summary.json"
        summary.write_text(io.canonical_json({
            "label": label, "aggregates": self.aggregates(),
            "config": self.config_fingerprint, "n_subjects": len({r[0] for r in self.rows}),
        }) + "\n")
        return [tsv, summary]


def image_metrics(generated, target, features=None) -> dict[str, float]:
    return {"SSIM": ssim(generated, target), "PSNR": psnr(generated, target),
            "LPIPS": lpips(generated, target, features), "NMI": nmi(generated, target)}


def evaluate_testset(model, items, seed=0, features=None) -> MetricsReport:
    """Score generated target slices against ground truth for every test subject.

    ``model`` is a trained ``ModelState`` or any callable mapping an ``EvalItem``
    to a 256x256 image in [0, 1].
    """
    from .model import ModelState, generate_batch

    items = list(items)
    if not items:
        raise DataError("empty test set")
    for it in items:
        if it.target is None:
            raise DataError(f"{it.subject_id}: missing ground-truth target")
    features = features or default_extractor()
    if isinstance(model, ModelState):
        conds = np.stack([it.condition for it in items])
        gens = generate_batch(model, conds, seed=seed)
    else:
        gens = [np.asarray(model(it)) for it in items]
    report = MetricsReport(extractor_id=features.extractor_id)
    for it, gen in zip(items, gens):
        for name, value in image_metrics(gen, it.target, features).items():
            report.rows.append((it.subject_id, name, value))
    return report
