"""Procedural abdominal-like phantoms with analytic fat areas.

Each subject is a stack of layered ellipses: an outer body ellipse, a
subcutaneous fat annulus of spline-varying thickness, a soft-tissue interior
and one to four circular "organs" whose radii follow splines along z.  Shapes
are parameterized by an anatomical coordinate ``u`` (0 at the cranial end of
the abdomen, 1 at the caudal end, 0.5 at the target level), so every subject's
true target level, fat area and anatomy score are known in closed form.

The z frame is shared by all subjects: z = 0 mm is the population's nominal
target level and each subject's true target sits at ``target_offset_mm``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import io
from .errors import ConfigError, DataError
from .preprocess import SliceImage

FAT_HU = -95.0
SOFT_TISSUE_HU = 50.0
ORGAN_HU = 150.0
BACKGROUND_HU = -1000.0
DEFAULT_FOV_MM = 400.0
TARGET_SCORE = 5.0  # anatomy score at the target level (u = 0.5)
SCORE_SCALE = 10.0

U_KNOTS = np.linspace(-0.5, 1.5, 9)
OVERRIDE_KEYS = ("body_a_mm", "body_b_mm", "fat_mm", "target_offset_mm", "length_mm",
                 "n_organs", "fat_slope")

_ID_RE = re.compile(r"^ph(\d+)$")


@dataclass(frozen=True)
class SubjectShape:
    seed: int
    target_offset_mm: float
    length_mm: float
    body_a_mm: float
    body_b_mm: float
    fat_mm: float
    fat_slope: float
    body_knots: tuple
    fat_knots: tuple
    organ_centers: tuple
    organ_knots: tuple
    organ_hu: tuple

    @classmethod
    def from_seed(cls, seed: int, overrides=None) -> "SubjectShape":
        rng = np.random.default_rng([int(seed), 0x5EED])
        n_organs = int(rng.integers(1, 5))
        params = dict(
            target_offset_mm=float(rng.uniform(-9.0, 9.0)),
            length_mm=float(rng.uniform(110.0, 130.0)),
            body_a_mm=float(rng.uniform(130.0, 165.0)),
            body_b_mm=float(rng.uniform(95.0, 125.0)),
            fat_mm=float(rng.uniform(10.0, 22.0)),
            fat_slope=0.9,
        )
        body_knots = tuple(float(v) for v in rng.uniform(-0.03, 0.03, size=len(U_KNOTS)))
        fat_knots = tuple(float(v) for v in rng.uniform(-0.05, 0.05, size=len(U_KNOTS)))
        centers = rng.uniform(-0.4, 0.4, size=(4, 2))
        # Radii as fractions of the smaller inner semi-axis; negative knots clip to "absent".
        radii = rng.uniform(-0.08, 0.25, size=(4, len(U_KNOTS)))
        hu = rng.uniform(ORGAN_HU - 15.0, ORGAN_HU + 15.0, size=4)
        for key, value in (overrides or {}).items():
            if key not in OVERRIDE_KEYS:
                raise ConfigError(f"shape_overrides.{key}", "unknown shape parameter")
            if key == "n_organs":
                n_organs = int(value)
                if not 0 <= n_organs <= 4:
                    raise ConfigError("shape_overrides.n_organs", "must be in 0..4")
            else:
                params[key] = float(value)
        if overrides and ("body_a_mm" in overrides or "body_b_mm" in overrides or
                          "fat_mm" in overrides):
            # Explicit geometry means explicit: drop the random wobble.
            body_knots = tuple(0.0 for _ in U_KNOTS)
            fat_knots = tuple(0.0 for _ in U_KNOTS)
        return cls(
            seed=int(seed),
            body_knots=body_knots,
            fat_knots=fat_knots,
            organ_centers=tuple(tuple(float(c) for c in row) for row in centers[:n_organs]),
            organ_knots=tuple(tuple(float(r) for r in row) for row in radii[:n_organs]),
            organ_hu=tuple(float(h) for h in hu[:n_organs]),
            **params,
        )

    # anatomy ----------------------------------------------------------------

    def u_of_z(self, z_mm):
        return 0.5 + (np.asarray(z_mm, dtype=np.float64) - self.target_offset_mm) / self.length_mm

    def z_of_u(self, u):
        return self.target_offset_mm + (np.asarray(u, dtype=np.float64) - 0.5) * self.length_mm

    def anatomy_score(self, z_mm):
        return SCORE_SCALE * self.u_of_z(z_mm)

    def _check_u(self, u):
        u = np.asarray(u, dtype=np.float64)
        if np.any(u < U_KNOTS[0]) or np.any(u > U_KNOTS[-1]):
            raise ConfigError("z_mm", "outside the modeled anatomical extent")
        return u

    # geometry ---------------------------------------------------------------

    @cached_property
    def _body_spline(self):
        return CubicSpline(U_KNOTS, np.asarray(self.body_knots), bc_type="natural")

    @cached_property
    def _fat_spline(self):
        return CubicSpline(U_KNOTS, np.asarray(self.fat_knots), bc_type="natural")

    @cached_property
    def _organ_splines(self):
        return [CubicSpline(U_KNOTS, np.asarray(k), bc_type="natural") for k in self.organ_knots]

    def semi_axes(self, z_mm):
        u = self._check_u(self.u_of_z(z_mm))
        wobble = 1.0 + 0.06 * np.sin(np.pi * (u - 0.5)) + self._body_spline(u)
        return self.body_a_mm * wobble, self.body_b_mm * wobble

    def fat_thickness(self, z_mm):
        u = self._check_u(self.u_of_z(z_mm))
        profile = 1.0 + self.fat_slope * (u - 0.5) + self._fat_spline(u)
        return self.fat_mm * profile

    def fat_area(self, z_mm):
        """Analytic area (mm^2) of the fat annulus at ``z_mm``."""
        a, b = self.semi_axes(z_mm)
        t = self.fat_thickness(z_mm)
        return np.pi * (a * b - (a - t) * (b - t))

    def fat_area_slope(self, z_mm):
        """d(fat_area)/dz from the spline derivatives (mm^2 per mm)."""
        z = np.asarray(z_mm, dtype=np.float64)
        u = self._check_u(self.u_of_z(z))
        du = 1.0 / self.length_mm
        w = 1.0 + 0.06 * np.sin(np.pi * (u - 0.5)) + self._body_spline(u)
        dw = (0.06 * np.pi * np.cos(np.pi * (u - 0.5)) + self._body_spline(u, 1)) * du
        p = 1.0 + self.fat_slope * (u - 0.5) + self._fat_spline(u)
        dp = (self.fat_slope + self._fat_spline(u, 1)) * du
        a, b, t = self.body_a_mm * w, self.body_b_mm * w, self.fat_mm * p
        da, db, dt = self.body_a_mm * dw, self.body_b_mm * dw, self.fat_mm * dp
        return np.pi * (da * b + a * db - (da - dt) * (b - t) - (a - t) * (db - dt))

    def organ_radii(self, z_mm):
        """Organ radii in mm at ``z_mm`` (0 where an organ is absent)."""
        u = self._check_u(self.u_of_z(z_mm))
        a, b = self.semi_axes(z_mm)
        t = self.fat_thickness(z_mm)
        inner = min(float(a - t), float(b - t))
        return [min(0.3, max(0.0, float(s(u)))) * inner for s in self._organ_splines]

    # rasterization ----------------------------------------------------------

    def _grid(self, size, fov_mm):
        px = fov_mm / size
        c = (np.arange(size) + 0.5 - size / 2.0) * px
        return c[None, :], c[:, None]  # x across columns, y down rows

    def fat_mask(self, z_mm, size, fov_mm=DEFAULT_FOV_MM) -> np.ndarray:
        x, y = self._grid(size, fov_mm)
        a, b = (float(v) for v in self.semi_axes(z_mm))
        t = float(self.fat_thickness(z_mm))
        outer = (x / a) ** 2 + (y / b) ** 2 <= 1.0
        inner = (x / (a - t)) ** 2 + (y / (b - t)) ** 2 <= 1.0
        return outer & ~inner

    def render(self, z_mm, size, fov_mm=DEFAULT_FOV_MM, noise_std_hu=5.0) -> np.ndarray:
        """Raw HU image of the axial cross-section at ``z_mm``."""
        x, y = self._grid(size, fov_mm)
        a, b = (float(v) for v in self.semi_axes(z_mm))
        t = float(self.fat_thickness(z_mm))
        ai, bi = a - t, b - t
        img = np.full((size, size), BACKGROUND_HU)
        img[(x / a) ** 2 + (y / b) ** 2 <= 1.0] = FAT_HU
        img[(x / ai) ** 2 + (y / bi) ** 2 <= 1.0] = SOFT_TISSUE_HU
        for (cx, cy), r, hu in zip(self.organ_centers, self.organ_radii(z_mm), self.organ_hu):
            if r > 0:
                img[(x - cx * ai) ** 2 + (y - cy * bi) ** 2 <= r * r] = hu
        if noise_std_hu > 0:
            img = img + _slice_rng(self.seed, z_mm, size).normal(0.0, noise_std_hu, img.shape)
        return img.astype(np.float32)


def _slice_rng(seed, z_mm, size):
    # Noise is keyed on (subject, z, size) so the same cross-section always looks the same.
    zkey = int(round(float(z_mm) * 1000.0)) + 10**9
    return np.random.default_rng([int(seed), zkey, int(size)])


@dataclass
class PhantomConfig:
    seed: int
    n_slices: int = 40
    z_spacing_mm: float = 3.0
    image_size: int = 256
    fov_mm: float = DEFAULT_FOV_MM
    noise_std_hu: float = 5.0
    shape_overrides: dict = field(default_factory=dict)

    def validate(self) -> "PhantomConfig":
        if int(self.n_slices) < 2:
            raise ConfigError("n_slices", f"must be >= 2, got {self.n_slices}")
        if not self.z_spacing_mm > 0:
            raise ConfigError("z_spacing_mm", f"must be > 0, got {self.z_spacing_mm}")
        if self.image_size not in (256, 512):
            raise ConfigError("image_size", f"must be 256 or 512, got {self.image_size}")
        if not self.fov_mm > 0:
            raise ConfigError("fov_mm", f"must be > 0, got {self.fov_mm}")
        if not 0 <= self.noise_std_hu <= 10:
            raise ConfigError("noise_std_hu", f"must lie in [0, 10], got {self.noise_std_hu}")
        for key in self.shape_overrides:
            if key not in OVERRIDE_KEYS:
                raise ConfigError(f"shape_overrides.{key}", "unknown shape parameter")
        return self

    def z_positions(self) -> np.ndarray:
        n = int(self.n_slices)
        return (np.arange(n) - (n - 1) / 2.0) * float(self.z_spacing_mm)


@dataclass
class Volume:
    voxels: np.ndarray  # (n_slices, H, W) raw HU
    z_positions_mm: np.ndarray
    anatomy_score: np.ndarray
    subject_id: str
    z_spacing_mm: float
    pixel_spacing_mm: float
    shape: SubjectShape | None = None

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    def slice(self, index: int) -> SliceImage:
        return SliceImage(self.voxels[index], units="raw_hu", subject_id=self.subject_id,
                          z_mm=float(self.z_positions_mm[index]))

    def nominal_target_index(self) -> int:
        """Index of the slice nearest the subject's true target level."""
        if self.shape is None:
            raise DataError(f"{self.subject_id}: no generator shape attached")
        return int(np.argmin(np.abs(self.z_positions_mm - self.shape.target_offset_mm)))


def subject_id_for(seed: int, overrides=None) -> str:
    sid = f"ph{int(seed)}"
    if overrides:
        sid += "-" + io.fingerprint(dict(overrides))[:8]
    return sid


def generate_volume(config: PhantomConfig) -> Volume:
    config.validate()
    shape = SubjectShape.from_seed(config.seed, config.shape_overrides)
    z = config.z_positions()
    voxels = np.stack([shape.render(zi, config.image_size, config.fov_mm, config.noise_std_hu)
                       for zi in z])
    return Volume(voxels=voxels, z_positions_mm=z, anatomy_score=shape.anatomy_score(z),
                  subject_id=subject_id_for(config.seed, config.shape_overrides),
                  z_spacing_mm=float(config.z_spacing_mm),
                  pixel_spacing_mm=config.fov_mm / config.image_size, shape=shape)


def resolve_subject(subject) -> SubjectShape:
    if isinstance(subject, SubjectShape):
        return subject
    if isinstance(subject, Volume) and subject.shape is not None:
        return subject.shape
    m = _ID_RE.match(str(subject))
    if m is None:
        raise LookupError(f"unknown phantom subject {subject!r}")
    return SubjectShape.from_seed(int(m.group(1)))


def fat_area_oracle(subject, z_mm) -> float:
    """Analytic fat area (mm^2) for a phantom subject id (or shape) at ``z_mm``."""
    return float(resolve_subject(subject).fat_area(z_mm))


# cohorts ----------------------------------------------------------------------

@dataclass
class Visit:
    visit_index: int
    age_years: float
    slice: SliceImage
    true_z_offset_mm: float
    fat_area_truth_mm2: float


@dataclass
class SubjectSeries:
    subject_id: str
    visits: list[Visit]
    near_zero_jitter: bool = False

    @property
    def offsets(self) -> np.ndarray:
        return np.array([v.true_z_offset_mm for v in self.visits])

    def jitter_span(self) -> float:
        return float(np.ptp(self.offsets)) if self.visits else 0.0


def cohort_subject_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def generate_cohort(seed: int, n_subjects: int, visits_per_subject=(2, 5),
                    jitter_mm=(-30.0, 30.0), near_zero_fraction=0.4, near_zero_mm=3.0,
                    image_size=512, extent_mm=117.0, fov_mm=DEFAULT_FOV_MM,
                    noise_std_hu=5.0) -> list[SubjectSeries]:
    """Longitudinal single-slice series with hidden positional jitter per visit."""
    lo, hi = (float(v) for v in jitter_mm)
    vmin, vmax = (int(v) for v in visits_per_subject)
    if lo > hi:
        raise ConfigError("jitter_mm", "lower bound exceeds upper bound")
    if max(abs(lo), abs(hi)) > extent_mm / 2.0:
        raise ConfigError("jitter_mm", f"exceeds half the volume extent ({extent_mm / 2.0} mm)")
    if vmin < 2 or vmax < vmin:
        raise ConfigError("visits_per_subject", "need 2 <= min <= max")
    if not 0.0 <= near_zero_fraction <= 1.0:
        raise ConfigError("near_zero_fraction", "must lie in [0, 1]")
    if image_size not in (256, 512):
        raise ConfigError("image_size", "must be 256 or 512")

    rng = np.random.default_rng([int(seed), 0xC0])
    n_quiet = int(round(near_zero_fraction * n_subjects))
    quiet = set(rng.permutation(n_subjects)[:n_quiet].tolist())
    cohort = []
    for i in range(n_subjects):
        sseed = cohort_subject_seed(seed, i)
        shape = SubjectShape.from_seed(sseed)
        sid = subject_id_for(sseed)
        vrng = np.random.default_rng([int(seed), i, 1])
        n_visits = int(vrng.integers(vmin, vmax + 1))
        if i in quiet:
            jl, jh = max(lo, -near_zero_mm), min(hi, near_zero_mm)
            if jl > jh:  # range excludes the near-zero band; pin to the closest edge
                jl = jh = lo if lo > 0 else hi
        else:
            jl, jh = lo, hi
        offsets = vrng.uniform(jl, jh, size=n_visits)
        age = float(vrng.uniform(50.0, 80.0))
        gaps = vrng.uniform(1.0, 4.0, size=n_visits)
        visits = []
        for k, off in enumerate(offsets):
            z = shape.target_offset_mm + float(off)
            img = SliceImage(shape.render(z, image_size, fov_mm, noise_std_hu), units="raw_hu",
                             subject_id=sid, visit_index=k, z_mm=z)
            visits.append(Visit(visit_index=k, age_years=age, slice=img,
                                true_z_offset_mm=float(off),
                                fat_area_truth_mm2=float(shape.fat_area(z))))
            age += float(gaps[k])
        cohort.append(SubjectSeries(subject_id=sid, visits=visits, near_zero_jitter=i in quiet))
    return cohort


# persistence ------------------------------------------------------------------

def save_volume(volume: Volume, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{volume.subject_id}.vol"
    io.write_grid(path, volume.voxels, subject_id=volume.subject_id, units="raw_hu",
                  hu_scale=1.0, z_spacing_mm=volume.z_spacing_mm,
                  pixel_spacing_mm=volume.pixel_spacing_mm,
                  z_positions_mm=[float(z) for z in volume.z_positions_mm],
                  shape_seed=None if volume.shape is None else volume.shape.seed)
    io.write_scores(directory / f"{volume.subject_id}.bpr", volume.anatomy_score)
    return path


def load_volume(path) -> Volume:
    path = Path(path)
    header, voxels = io.read_grid(path)
    if voxels.ndim != 3:
        raise DataError(f"{path}: expected a 3D grid")
    scores_path = path.with_suffix(".bpr")
    scores = io.read_scores(scores_path) if scores_path.exists() else np.array([])
    if scores.size and scores.size != voxels.shape[0]:
        raise DataError(f"{scores_path}: {scores.size} scores for {voxels.shape[0]} slices")
    z = np.asarray(header["z_positions_mm"], dtype=np.float64)
    return Volume(voxels=voxels, z_positions_mm=z, anatomy_score=scores,
                  subject_id=header["subject_id"], z_spacing_mm=float(header["z_spacing_mm"]),
                  pixel_spacing_mm=float(header["pixel_spacing_mm"]))


def save_cohort(cohort: list[SubjectSeries], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for series in cohort:
        for v in series.visits:
            name = f"{series.subject_id}_v{v.visit_index:02d}.slc"
            io.write_grid(directory / name, v.slice.pixels, subject_id=series.subject_id,
                          units="raw_hu", hu_scale=1.0, z_mm=v.slice.z_mm)
            rows.append([series.subject_id, v.visit_index, v.age_years, v.true_z_offset_mm,
                         v.fat_area_truth_mm2, int(series.near_zero_jitter), name])
    index = directory / "cohort.tsv"
    io.write_tsv(index, ["subject_id", "visit_index", "age_years", "true_z_offset_mm",
                         "fat_area_truth_mm2", "near_zero_jitter", "file"], rows)
    return index


def load_cohort(directory) -> list[SubjectSeries]:
    directory = Path(directory)
    series: dict[str, SubjectSeries] = {}
    for row in io.read_tsv(directory / "cohort.tsv"):
        _, pixels = io.read_grid(directory / row["file"])
        sid = row["subject_id"]
        visit = Visit(visit_index=int(row["visit_index"]), age_years=float(row["age_years"]),
                      slice=SliceImage(pixels, units="raw_hu", subject_id=sid,
                                       visit_index=int(row["visit_index"])),
                      true_z_offset_mm=float(row["true_z_offset_mm"]),
                      fat_area_truth_mm2=float(row["fat_area_truth_mm2"]))
        s = series.setdefault(sid, SubjectSeries(sid, [], bool(int(row["near_zero_jitter"]))))
        s.visits.append(visit)
    return list(series.values())
