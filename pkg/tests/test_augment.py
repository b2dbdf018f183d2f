import numpy as np
import pytest

from triseg.augment import (
    AugmentConfig,
    TRANSFORM_ORDER,
    apply_plan,
    augment_pair,
    fork_rng,
    sample_plan,
)
from triseg.errors import ConfigError, GeometryMismatch

ALL_OFF = dict(p_hflip=0, p_elastic=0, p_rotate=0, p_shift_scale_rotate=0,
               p_gauss_noise=0, p_gauss_blur=0)


def _slice_pair(rng, h=16, w=16):
    image = rng.uniform(0, 1, size=(3, h, w)).astype(np.float32)
    label = rng.integers(0, 4, size=(h, w)).astype(np.int16)
    return image, label


class TestForkRng:
    def test_same_args_same_stream(self):
        a = fork_rng(42, 7).random(100)
        b = fork_rng(42, 7).random(100)
        np.testing.assert_array_equal(a, b)

    def test_different_index_differs(self):
        a = fork_rng(42, 7).random(100)
        b = fork_rng(42, 8).random(100)
        assert not np.array_equal(a, b)

    def test_different_seed_differs(self):
        a = fork_rng(42, 7).random(100)
        b = fork_rng(43, 7).random(100)
        assert not np.array_equal(a, b)

    def test_tuple_indices(self):
        a = fork_rng(1, (2, 3)).random(10)
        b = fork_rng(1, (2, 3)).random(10)
        c = fork_rng(1, (3, 2)).random(10)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestNoOpAndInvolution:
    def test_all_probabilities_zero_is_identity(self, rng):
        image, label = _slice_pair(rng)
        cfg = AugmentConfig(**ALL_OFF)
        out_img, out_lab = augment_pair(image, label, cfg, fork_rng(0, 0))
        np.testing.assert_array_equal(out_img, image)
        np.testing.assert_array_equal(out_lab, label)

    def test_hflip_only_reverses_columns(self, rng):
        image, label = _slice_pair(rng)
        cfg = AugmentConfig(**{**ALL_OFF, "p_hflip": 1.0})
        out_img, out_lab = augment_pair(image, label, cfg, fork_rng(0, 0))
        np.testing.assert_array_equal(out_img, image[..., ::-1])
        np.testing.assert_array_equal(out_lab, label[..., ::-1])

    def test_hflip_twice_is_identity(self, rng):
        image, label = _slice_pair(rng)
        cfg = AugmentConfig(**{**ALL_OFF, "p_hflip": 1.0})
        i1, l1 = augment_pair(image, label, cfg, fork_rng(0, 0))
        i2, l2 = augment_pair(i1, l1, cfg, fork_rng(0, 1))
        np.testing.assert_array_equal(i2, image)
        np.testing.assert_array_equal(l2, label)


class TestFiringRates:
    def test_monte_carlo_rates_match_defaults(self):
        cfg = AugmentConfig()
        expected = {"hflip": 0.4, "elastic": 0.3, "rotate": 0.4,
                    "shift_scale_rotate": 0.3, "noise": 0.2, "blur": 0.2}
        counts = {name: 0 for name in TRANSFORM_ORDER}
        n = 1000
        for i in range(n):
            plan = sample_plan(cfg, fork_rng(1234, i), (8, 8))
            for name in plan.fired():
                counts[name] += 1
        for name, p in expected.items():
            assert abs(counts[name] / n - p) <= 0.05, (name, counts[name] / n)


class TestSpatialConsistency:
    def test_same_parameters_for_image_and_label(self, rng):
        # a coordinate-grid image transported with the label must agree
        h = w = 24
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        image = np.stack([yy, xx, np.zeros_like(yy)]).astype(np.float64)
        label = (yy * w + xx).astype(np.int16)   # unique id per pixel
        cfg = AugmentConfig(**{**ALL_OFF, "p_shift_scale_rotate": 1.0})
        out_img, out_lab = augment_pair(image, label, cfg, fork_rng(5, 1))
        inside = out_lab > 0
        ly, lx = out_lab[inside] // w, out_lab[inside] % w
        # bilinear vs nearest disagree by at most one voxel
        assert np.abs(out_img[0][inside] - ly).max() <= 1.0
        assert np.abs(out_img[1][inside] - lx).max() <= 1.0

    def test_photometric_transforms_leave_label_alone(self, rng):
        image, label = _slice_pair(rng)
        cfg = AugmentConfig(**{**ALL_OFF, "p_gauss_noise": 1.0,
                               "p_gauss_blur": 1.0})
        out_img, out_lab = augment_pair(image, label, cfg, fork_rng(2, 2))
        np.testing.assert_array_equal(out_lab, label)
        assert not np.array_equal(out_img, image)

    def test_label_support_never_grows(self, rng):
        cfg = AugmentConfig()
        for i in range(30):
            image, label = _slice_pair(rng)
            out_img, out_lab = augment_pair(image, label, cfg, fork_rng(9, i))
            assert set(np.unique(out_lab)) <= {0, 1, 2, 3}
            assert np.isfinite(out_img).all()
            assert out_img.shape == image.shape
            assert out_lab.shape == label.shape

    def test_rotation_preserves_shape(self, rng):
        image, label = _slice_pair(rng, h=19, w=23)
        cfg = AugmentConfig(**{**ALL_OFF, "p_rotate": 1.0})
        out_img, out_lab = augment_pair(image, label, cfg, fork_rng(3, 3))
        assert out_img.shape == (3, 19, 23)
        assert out_lab.shape == (19, 23)


class TestValidation:
    def test_shape_mismatch_rejected(self, rng):
        image = rng.uniform(size=(3, 8, 8))
        label = rng.integers(0, 4, size=(9, 9))
        with pytest.raises(GeometryMismatch):
            augment_pair(image, label, AugmentConfig(), fork_rng(0, 0))

    def test_bad_probability_rejected(self):
        with pytest.raises(ConfigError):
            AugmentConfig(p_hflip=1.5)

    def test_label_optional(self, rng):
        image, _ = _slice_pair(rng)
        out_img, out_lab = augment_pair(image, None, AugmentConfig(),
                                        fork_rng(0, 0))
        assert out_lab is None
        assert out_img.shape == image.shape


class TestDeterminism:
    def test_same_stream_same_output(self, rng):
        image, label = _slice_pair(rng)
        cfg = AugmentConfig()
        a_img, a_lab = augment_pair(image, label, cfg, fork_rng(7, 11))
        b_img, b_lab = augment_pair(image, label, cfg, fork_rng(7, 11))
        np.testing.assert_array_equal(a_img, b_img)
        np.testing.assert_array_equal(a_lab, b_lab)

    def test_elastic_displacement_capped(self, rng):
        image, label = _slice_pair(rng, 32, 32)
        cfg = AugmentConfig(**{**ALL_OFF, "p_elastic": 1.0})
        plan = sample_plan(cfg, fork_rng(4, 4), (32, 32))
        dy, dx = plan.elastic
        cap = cfg.elastic_max_disp * 32
        assert np.abs(dy).max() <= cap + 1e-9
        assert np.abs(dx).max() <= cap + 1e-9
