import numpy as np
import pytest

from conftest import random_case
from oracles import sort_percentile

from triseg.data import LabelVolume, ModalityVolume, remap_labels, RAW_LABELS
from triseg.errors import ConfigError, CropTooLarge, EmptyBrain, GeometryMismatch
from triseg.preprocess import (
    CropManifest,
    PreprocessConfig,
    clip_percentiles,
    crop_offsets,
    crop_volume,
    minmax_scale,
    preprocess_case,
    uncrop_labels,
    zscore_slices,
)


def _vol(arr, mod="T2"):
    return ModalityVolume(np.asarray(arr, dtype=np.float32), mod)


class TestClipPercentiles:
    def test_constant_nonzero_unchanged(self):
        v = _vol(np.full((6, 6, 6), 7.0))
        out = clip_percentiles(v, PreprocessConfig())
        np.testing.assert_array_equal(out.voxels, v.voxels)

    def test_matches_sort_oracle_on_uniform_ramp(self):
        # nonzero voxels take values 1..1000 exactly once
        arr = np.zeros(1728, dtype=np.float32)
        arr[:1000] = np.arange(1, 1001)
        rng = np.random.default_rng(0)
        rng.shuffle(arr)
        v = _vol(arr.reshape(12, 12, 12))
        out = clip_percentiles(v, PreprocessConfig()).voxels
        nz = out[v.voxels != 0]
        lo = sort_percentile(np.arange(1, 1001), 1)
        hi = sort_percentile(np.arange(1, 1001), 99)
        assert nz.min() == pytest.approx(lo, abs=1e-4)
        assert nz.max() == pytest.approx(hi, abs=1e-4)

    def test_background_zeros_preserved(self, rng):
        arr = rng.uniform(5, 10, size=(8, 8, 8)).astype(np.float32)
        arr[:4] = 0.0
        out = clip_percentiles(_vol(arr), PreprocessConfig()).voxels
        assert (out[:4] == 0).all()

    def test_all_zero_raises(self):
        with pytest.raises(EmptyBrain):
            clip_percentiles(_vol(np.zeros((4, 4, 4))), PreprocessConfig())

    def test_bad_percentile_config(self):
        with pytest.raises(ConfigError):
            PreprocessConfig(clip_lo_pct=0.9, clip_hi_pct=0.1)


class TestZscoreSlices:
    def test_two_point_slice(self):
        arr = np.zeros((1, 2, 1), dtype=np.float32)
        arr[0, 0, 0], arr[0, 1, 0] = 1.0, 3.0
        out = zscore_slices(_vol(arr), axis=2).voxels
        np.testing.assert_allclose(out[:, :, 0].ravel(), [-1.0, 1.0], atol=1e-6)

    def test_constant_slice_zeroed(self):
        arr = np.full((4, 4, 2), 3.3, dtype=np.float32)
        out = zscore_slices(_vol(arr), axis=2).voxels
        assert (out == 0).all()

    def test_moments_against_recomputation(self, rng):
        arr = rng.normal(50, 12, size=(8, 8, 3)).astype(np.float32)
        out = zscore_slices(_vol(arr), axis=2).voxels.astype(np.float64)
        for k in range(3):
            sl = out[:, :, k]
            assert abs(sl.mean()) < 1e-6
            assert abs(sl.std() - 1.0) < 1e-6

    def test_affine_invariance_per_slice(self, rng):
        arr = rng.normal(size=(6, 6, 4)).astype(np.float32)
        scaled = (arr * 3.7 + 11.0).astype(np.float32)
        a = zscore_slices(_vol(arr), axis=2).voxels
        b = zscore_slices(_vol(scaled), axis=2).voxels
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_axis_choice(self, rng):
        arr = rng.normal(size=(5, 6, 7)).astype(np.float32)
        out = zscore_slices(_vol(arr), axis=0).voxels.astype(np.float64)
        assert abs(out[2].mean()) < 1e-6


class TestMinmaxScale:
    def test_three_values(self):
        out = minmax_scale(_vol(np.array([[[2.0, 4.0, 6.0]]]))).voxels
        np.testing.assert_allclose(out.ravel(), [0.0, 0.5, 1.0], atol=1e-7)

    def test_constant_volume(self):
        out = minmax_scale(_vol(np.full((3, 3, 3), 9.0))).voxels
        assert (out == 0).all()

    def test_range_contract(self, rng):
        out = minmax_scale(_vol(rng.normal(size=(6, 6, 6)))).voxels
        assert out.min() == pytest.approx(0.0, abs=1e-7)
        assert out.max() == pytest.approx(1.0, abs=1e-7)


class TestCrop:
    def test_brats_geometry(self):
        assert crop_offsets((240, 240, 155), (190, 190, 140)) == (25, 25, 7)

    def test_crop_equal_identity(self, rng):
        arr = rng.normal(size=(5, 6, 7)).astype(np.float32)
        cfg = PreprocessConfig(crop_shape=(5, 6, 7))
        np.testing.assert_array_equal(crop_volume(_vol(arr), cfg).voxels, arr)

    def test_too_large(self):
        with pytest.raises(CropTooLarge):
            crop_offsets((100, 100, 100), (190, 190, 140))

    def test_offsets_floor(self):
        assert crop_offsets((7, 8, 9), (4, 4, 4)) == (1, 2, 2)

    def test_label_crop(self, rng):
        labels = LabelVolume(rng.integers(0, 4, size=(8, 8, 8)).astype(np.int16))
        cfg = PreprocessConfig(crop_shape=(4, 4, 4))
        out = crop_volume(labels, cfg)
        np.testing.assert_array_equal(out.voxels, labels.voxels[2:6, 2:6, 2:6])

    def test_crop_commutes_with_remap(self, rng):
        raw = LabelVolume(
            rng.choice([0, 1, 2, 4], size=(8, 8, 8)).astype(np.int16),
            allowed=RAW_LABELS)
        cfg = PreprocessConfig(crop_shape=(5, 5, 5))
        a = crop_volume(remap_labels(raw), cfg)
        cropped = crop_volume(raw, cfg)
        b = remap_labels(LabelVolume(cropped.voxels, allowed=RAW_LABELS))
        np.testing.assert_array_equal(a.voxels, b.voxels)


class TestPreprocessCase:
    def _case(self, rng, shape=(24, 22, 20)):
        case = random_case(rng, shape=shape)
        # scanner-ish intensities with zero background margin
        for mod, vol in case.volumes.items():
            arr = rng.uniform(50, 500, size=shape).astype(np.float32)
            arr[:2] = 0
            vol.voxels = arr
        return case

    def test_output_range_shape_and_manifest(self, rng):
        case = self._case(rng)
        cfg = PreprocessConfig(crop_shape=(16, 16, 16))
        out, manifest = preprocess_case(case, cfg)
        assert out.shape == (16, 16, 16)
        for mod in ("T1ce", "T2", "FLAIR"):
            v = out.volumes[mod].voxels
            assert np.isfinite(v).all()
            assert v.min() >= 0.0 and v.max() <= 1.0
        assert manifest.offsets == (4, 3, 2)
        assert manifest.original_shape == (24, 22, 20)

    def test_labels_use_same_offsets(self, rng):
        case = self._case(rng)
        cfg = PreprocessConfig(crop_shape=(16, 16, 16))
        out, manifest = preprocess_case(case, cfg)
        off = manifest.offsets
        probes = [tuple(rng.integers(0, 16, size=3)) for _ in range(10)]
        for p in probes:
            src = tuple(pi + oi for pi, oi in zip(p, off))
            assert out.labels.voxels[p] == case.labels.voxels[src]

    def test_case_without_labels(self, rng):
        case = self._case(rng)
        case = case.with_(labels=None)
        out, _ = preprocess_case(case, PreprocessConfig(crop_shape=(16, 16, 16)))
        assert out.labels is None

    def test_nan_free_on_adversarial_slices(self, rng):
        case = self._case(rng)
        # make one axial slice constant and one all-zero
        for vol in case.volumes.values():
            vol.voxels[:, :, 3] = 77.0
            vol.voxels[:, :, 4] = 0.0
        out, _ = preprocess_case(case, PreprocessConfig(crop_shape=(16, 16, 16)))
        for mod in ("T1ce", "T2", "FLAIR"):
            v = out.volumes[mod].voxels
            assert np.isfinite(v).all()
            assert v.min() >= 0.0 and v.max() <= 1.0


class TestCropManifest:
    def test_json_round_trip(self, tmp_path):
        m = CropManifest((24, 22, 20), (16, 16, 16), (4, 3, 2))
        p = tmp_path / "m.json"
        m.save(p)
        assert CropManifest.load(p) == m

    def test_uncrop_places_voxels(self):
        m = CropManifest((10, 10, 10), (4, 4, 4), (3, 3, 3))
        cropped = np.ones((4, 4, 4), dtype=np.int16)
        out = uncrop_labels(cropped, m)
        assert out.shape == (10, 10, 10)
        assert out[3, 3, 3] == 1 and out[6, 6, 6] == 1
        assert out.sum() == 64

    def test_uncrop_shape_mismatch(self):
        m = CropManifest((10, 10, 10), (4, 4, 4), (3, 3, 3))
        with pytest.raises(GeometryMismatch):
            uncrop_labels(np.ones((5, 5, 5), np.int16), m)
