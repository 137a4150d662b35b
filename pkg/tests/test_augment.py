import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from daodet.augment import (
    AugConfig,
    AugRecord,
    Jitter,
    apply_aug,
    apply_aug_boxes,
    identity_record,
    sample_aug,
)
from daodet.geometry import AffineView, Box


def _image(h=64, w=80, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


seeds = st.integers(0, 2**31 - 1)
kinds = st.sampled_from(["weak", "strong_source", "strong_target"])


class TestSampleAug:
    def test_weak_has_no_photometric_or_occlusion(self):
        r = sample_aug("weak", (128, 128), 7)
        assert r.jitter is None and r.cutouts == () and r.mic_mask is None

    @given(kinds, seeds)
    def test_deterministic(self, kind, seed):
        assert sample_aug(kind, (96, 96), seed) == sample_aug(kind, (96, 96), seed)

    def test_mic_mask_count(self):
        r = sample_aug("strong_target", (128, 128), 3, AugConfig(mic_patch=32, mic_ratio=0.5))
        assert r.mic_mask.shape == (4, 4)
        assert int(r.mic_mask.sum()) == 8
        assert r.masked_fraction == 0.5

    def test_strong_source_cutouts(self):
        cfg = AugConfig()
        for seed in range(20):
            r = sample_aug("strong_source", (100, 100), seed, cfg)
            assert cfg.cutout_min_count <= len(r.cutouts) <= cfg.cutout_max_count
            for x0, y0, x1, y1 in r.cutouts:
                assert 0 <= x0 < x1 <= 100 and 0 <= y0 < y1 <= 100

    def test_too_small_for_mic_patch(self):
        with pytest.raises(ValueError):
            sample_aug("strong_target", (16, 64), 0, AugConfig(mic_patch=32))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sample_aug("medium", (32, 32), 0)

    @given(seeds)
    def test_weak_and_strong_share_geometry_ranges(self, seed):
        cfg = AugConfig()
        for kind in ("weak", "strong_source", "strong_target"):
            r = sample_aug(kind, (96, 96), seed, cfg)
            assert cfg.scale_min - 0.02 <= r.view.scale <= cfg.scale_max + 0.02
            assert r.out_shape == (round(96 * r.view.scale), round(96 * r.view.scale))

    def test_geometry_from_reuses_view(self):
        w = sample_aug("weak", (96, 96), 1)
        s = sample_aug("strong_target", (96, 96), 2, geometry_from=w)
        assert s.view == w.view and s.out_shape == w.out_shape

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            AugConfig(scale_min=1.5, scale_max=1.0)
        with pytest.raises(ValueError):
            AugConfig(mic_ratio=1.5)


class TestApplyAug:
    def test_identity_unchanged(self):
        img = _image()
        out = apply_aug(img, identity_record(img.shape[:2]))
        np.testing.assert_allclose(out.permute(1, 2, 0).numpy(), img / 255.0, atol=1e-6)

    def test_flip_twice_is_identity(self):
        img = _image()
        rec = AugRecord("weak", (64, 80), AffineView.hflip(80), (64, 80), 0)
        once = apply_aug(img, rec)
        twice = apply_aug(once, rec)
        np.testing.assert_allclose(twice.permute(1, 2, 0).numpy(), img / 255.0, atol=1e-6)

    def test_cutout_pixelwise(self):
        img = _image()
        rect = (10.0, 5.0, 30.0, 20.0)
        rec = AugRecord(
            "strong_source", (64, 80), AffineView.identity(), (64, 80), 0,
            jitter=None, cutouts=(rect,), fill=(0.25, 0.5, 0.75),
        )
        out = apply_aug(img, rec).permute(1, 2, 0).numpy()
        inside = np.zeros((64, 80), dtype=bool)
        inside[5:20, 10:30] = True
        np.testing.assert_allclose(out[inside], np.broadcast_to([0.25, 0.5, 0.75], out[inside].shape), atol=1e-7)
        np.testing.assert_allclose(out[~inside], (img / 255.0)[~inside], atol=1e-6)

    def test_mic_patches_filled(self):
        img = _image(64, 64)
        rec = sample_aug("strong_target", (64, 64), 5, AugConfig(mic_patch=16, scale_min=1, scale_max=1, flip_prob=0))
        rec = AugRecord(rec.kind, rec.image_shape, rec.view, rec.out_shape, rec.seed, None, (), rec.mic_mask, 16, (0.0, 0.0, 0.0))
        out = apply_aug(img, rec)
        for gy, gx in zip(*np.nonzero(rec.mic_mask)):
            assert torch.all(out[:, gy * 16:(gy + 1) * 16, gx * 16:(gx + 1) * 16] == 0)

    def test_output_shape_is_scaled_shape(self):
        img = _image(96, 96)
        for seed in range(5):
            rec = sample_aug("strong_target", (96, 96), seed)
            assert tuple(apply_aug(img, rec).shape) == (3, *rec.out_shape)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_aug(_image(64, 80), identity_record((80, 64)))

    def test_jitter_identity(self):
        img = _image()
        rec = AugRecord("strong_source", (64, 80), AffineView.identity(), (64, 80), 0, jitter=Jitter())
        np.testing.assert_allclose(apply_aug(img, rec).permute(1, 2, 0).numpy(), img / 255.0, atol=1e-6)

    def test_values_in_range(self):
        img = _image()
        for seed in range(5):
            out = apply_aug(img, sample_aug("strong_source", (64, 80), seed))
            assert out.min() >= 0 and out.max() <= 1


class TestApplyAugBoxes:
    def test_identity(self):
        b = [Box(1, 2, 3, 4)]
        assert apply_aug_boxes(b, identity_record((10, 10))) == b

    def test_flip_example(self):
        rec = AugRecord("weak", (50, 100), AffineView.hflip(100), (50, 100), 0)
        assert apply_aug_boxes([Box(10, 5, 30, 25)], rec)[0].as_tuple() == (70, 5, 90, 25)

    @given(kinds, seeds)
    def test_ignores_photometric_and_occlusion(self, kind, seed):
        rec = sample_aug(kind, (96, 96), seed)
        b = [Box(3, 4, 40, 50), Box(60, 10, 90, 33)]
        assert apply_aug_boxes(b, rec) == apply_aug_boxes(b, rec.geometric_only())
