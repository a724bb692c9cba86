import numpy as np
import pytest
from hypothesis import given, strategies as st

from cslicegen.errors import ConfigError
from cslicegen.phantom import (FAT_HU, ORGAN_HU, SOFT_TISSUE_HU, PhantomConfig, SubjectShape,
                               fat_area_oracle, generate_cohort, generate_volume, load_cohort,
                               load_volume, save_cohort, save_volume)


def test_config_echo():
    vol = generate_volume(PhantomConfig(seed=7, n_slices=40))
    assert vol.voxels.shape == (40, 256, 256)
    assert np.allclose(np.diff(vol.z_positions_mm), 3.0)


def test_deterministic():
    a = generate_volume(PhantomConfig(seed=3, n_slices=4))
    b = generate_volume(PhantomConfig(seed=3, n_slices=4))
    assert np.array_equal(a.voxels, b.voxels)
    c = generate_volume(PhantomConfig(seed=4, n_slices=4))
    assert not np.array_equal(a.voxels, c.voxels)


@pytest.mark.parametrize("field,value", [("n_slices", 1), ("z_spacing_mm", 0.0),
                                         ("image_size", 300), ("noise_std_hu", 20.0)])
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError) as err:
        generate_volume(PhantomConfig(seed=0, **{field: value}))
    assert err.value.field == field


def test_unknown_override_rejected():
    with pytest.raises(ConfigError):
        PhantomConfig(seed=0, shape_overrides={"bogus": 1}).validate()


@given(st.integers(0, 10_000))
def test_score_strictly_increasing_and_z_monotone(seed):
    shape = SubjectShape.from_seed(seed)
    z = PhantomConfig(seed=seed).z_positions()
    assert np.all(np.diff(z) > 0)
    assert np.all(np.diff(shape.anatomy_score(z)) > 0)


def test_intensity_bands_disjoint(small_volume):
    # Noise-free render: every pixel is one of the class values.
    shape = small_volume.shape
    img = shape.render(0.0, 256, noise_std_hu=0.0)
    vals = np.unique(img)
    assert vals.min() == -1000.0
    assert FAT_HU in vals and SOFT_TISSUE_HU in vals
    organs = vals[vals > SOFT_TISSUE_HU]
    assert np.all((organs >= ORGAN_HU - 15) & (organs <= ORGAN_HU + 15))


def _raster_area(shape, z, size=512, fov=400.0):
    return shape.fat_mask(z, size, fov).sum() * (fov / size) ** 2


@given(st.integers(0, 5000), st.floats(-50, 50))
def test_rasterized_fat_ring_matches_annulus(seed, z):
    shape = SubjectShape.from_seed(seed)
    a, b = shape.semi_axes(z)
    t = shape.fat_thickness(z)
    analytic = np.pi * (a * b - (a - t) * (b - t))
    assert abs(_raster_area(shape, z) - analytic) <= 0.05 * analytic
    assert fat_area_oracle(f"ph{seed}", z) == pytest.approx(analytic)


def test_oracle_circular_case():
    shape = SubjectShape.from_seed(0, {"body_a_mm": 120, "body_b_mm": 120, "fat_mm": 20,
                                       "fat_slope": 0.0, "target_offset_mm": 0.0})
    # At u = 0.5 the wobble vanishes, so outer radius 120 and inner radius 100.
    assert shape.fat_area(0.0) == pytest.approx(np.pi * (120 ** 2 - 100 ** 2))


def test_oracle_unknown_subject():
    with pytest.raises(LookupError):
        fat_area_oracle("patient-42", 0.0)


@given(st.integers(0, 2000))
def test_area_lipschitz_between_slices(seed):
    shape = SubjectShape.from_seed(seed)
    z = np.linspace(-55, 52, 400)
    bound = np.abs(shape.fat_area_slope(z)).max() * 1.05
    areas = shape.fat_area(np.arange(-55, 55, 3.0))
    assert np.all(np.abs(np.diff(areas)) <= bound * 3.0)


def test_zero_jitter_cohort_visits_equal_target():
    cohort = generate_cohort(5, 3, jitter_mm=(0, 0), image_size=256)
    for series in cohort:
        shape = SubjectShape.from_seed(int(series.subject_id[2:]))
        target = shape.render(shape.target_offset_mm, 256)
        for v in series.visits:
            assert v.true_z_offset_mm == 0.0
            assert np.array_equal(v.slice.pixels, target)


def test_cohort_deterministic_and_jittered():
    a = generate_cohort(9, 20, image_size=256)
    b = generate_cohort(9, 20, image_size=256)
    assert [s.subject_id for s in a] == [s.subject_id for s in b]
    assert all(np.array_equal(va.slice.pixels, vb.slice.pixels)
               for sa, sb in zip(a, b) for va, vb in zip(sa.visits, sb.visits))
    offs = np.abs(np.concatenate([s.offsets for s in a]))
    assert np.median(offs) > 0
    assert all(len(s.visits) >= 2 for s in a)
    quiet = [s for s in a if s.near_zero_jitter]
    assert len(quiet) == 8
    assert all(np.all(np.abs(s.offsets) <= 3.0) for s in quiet)


def test_cohort_jitter_range_error():
    with pytest.raises(ConfigError):
        generate_cohort(0, 2, jitter_mm=(-80, 80))


def test_volume_and_cohort_roundtrip(tmp_path, small_volume):
    path = save_volume(small_volume, tmp_path)
    back = load_volume(path)
    assert np.array_equal(back.voxels, small_volume.voxels)
    assert np.allclose(back.anatomy_score, small_volume.anatomy_score)
    cohort = generate_cohort(1, 2, image_size=256)
    save_cohort(cohort, tmp_path / "c")
    loaded = load_cohort(tmp_path / "c")
    assert [len(s.visits) for s in loaded] == [len(s.visits) for s in cohort]
    assert np.array_equal(loaded[0].visits[1].slice.pixels, cohort[0].visits[1].slice.pixels)
