import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msacount.annotations import HeadPoint, ImageRecord
from msacount.densitymaps import render_density, render_points, render_scale_masks
from msacount.headsize import SizeEstimatorConfig, estimate_record
from msacount.pipeline import (CropSpec, SyntheticSceneSpec, cap_resolution, capped_scale, crop_rng,
                               pixel_stats, sample_crop, split_train_val, synth_generate,
                               write_synthetic_dataset)


class TestResolutionCap:
    def test_large_image_scale(self):
        assert capped_scale(6000, 9000) == 0.18
        img = np.zeros((6000, 9000, 3), dtype=np.uint8)
        out, s = cap_resolution(img)
        assert s == 0.18 and out.shape == (1080, 1620, 3)

    def test_portrait(self):
        out, s = cap_resolution(np.zeros((9000, 6000, 3), dtype=np.uint8))
        assert out.shape == (1620, 1080, 3) and s == 0.18

    @pytest.mark.parametrize("hw", [(600, 800), (1080, 1920), (1920, 1080), (1, 1)])
    def test_within_bounds_passthrough(self, hw):
        img = np.random.default_rng(0).integers(0, 256, hw + (3,), dtype=np.uint8)
        out, s = cap_resolution(img)
        assert s == 1.0 and out is img

    def test_long_side_binds(self):
        out, s = cap_resolution(np.zeros((500, 4000, 3), dtype=np.uint8))
        assert s == 1920 / 4000 and out.shape == (240, 1920, 3)

    def test_idempotent(self):
        img = np.random.default_rng(0).integers(0, 256, (2500, 3100, 3), dtype=np.uint8)
        once, _ = cap_resolution(img)
        twice, s = cap_resolution(once)
        assert s == 1.0 and np.array_equal(once, twice)

    def test_empty(self):
        with pytest.raises(ValueError):
            cap_resolution(np.zeros((0, 5, 3), dtype=np.uint8))


def scene_parts(n=12, W=200, H=150, seed=0, C=3):
    rng = np.random.default_rng(seed)
    heads = tuple(HeadPoint(float(x), float(y), 10.0, int(b))
                  for x, y, b in zip(rng.uniform(0, W, n), rng.uniform(0, H, n), rng.integers(0, C, n)))
    rec = ImageRecord("s", None, W, H, heads)
    img = rng.integers(0, 256, (H, W, 3), dtype=np.uint8)
    return rec, img, render_density(rec, 6.0), render_scale_masks(rec, 6.0, C)


class TestCrops:
    def test_full_window_identity(self):
        rec, img, gt, m = scene_parts(W=64, H=64)
        c = sample_crop(rec, img, gt, m, CropSpec(size=64))
        assert np.array_equal(c.image, img) and np.array_equal(c.gt, gt.values)
        assert np.array_equal(c.masks, m.masks) and c.count == rec.count and c.window == (0, 0)

    def test_three_interior_heads(self):
        heads = (HeadPoint(40, 40, 5.0, 0), HeadPoint(60, 50, 5.0, 1), HeadPoint(50, 70, 5.0, 2),
                 HeadPoint(180, 140, 5.0, 0))
        rec = ImageRecord("t", None, 200, 200, heads)
        gt = render_density(rec, 4.0)
        m = render_scale_masks(rec, 4.0, 3)
        img = np.zeros((200, 200, 3), np.uint8)
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = sample_crop(rec, img, gt, m, CropSpec(size=100), rng)
            y0, x0 = c.window
            if y0 <= 28 and x0 <= 28 and y0 + 100 >= 83 and x0 + 100 >= 73:
                break
        else:
            pytest.fail("no window covering the three heads")
        sub = [h for h in heads[:3]]
        oracle = render_points([HeadPoint(h.x - x0, h.y - y0) for h in sub], 100, 100, 4.0)
        assert abs(float(c.gt.sum(dtype=np.float64)) - 3.0) <= 1e-4
        np.testing.assert_allclose(c.gt, oracle, atol=1e-6)

    def test_deterministic(self):
        rec, img, gt, m = scene_parts()
        spec = CropSpec(size=64, rng_seed=9)
        a = [sample_crop(rec, img, gt, m, spec, crop_rng(9, 0, 3)) for _ in range(1)]
        b = [sample_crop(rec, img, gt, m, spec, crop_rng(9, 0, 3)) for _ in range(1)]
        assert a[0].window == b[0].window
        assert a[0].image.tobytes() == b[0].image.tobytes() and a[0].gt.tobytes() == b[0].gt.tobytes()
        assert crop_rng(9, 0, 3).integers(1 << 30) != crop_rng(9, 0, 4).integers(1 << 30)

    def test_same_window_everywhere(self):
        rec, img, gt, m = scene_parts()
        c = sample_crop(rec, img, gt, m, CropSpec(size=64), np.random.default_rng(1))
        y0, x0 = c.window
        assert np.array_equal(c.image, img[y0:y0 + 64, x0:x0 + 64])
        assert np.array_equal(c.gt, gt.values[y0:y0 + 64, x0:x0 + 64])
        assert np.array_equal(c.masks, m.masks[:, y0:y0 + 64, x0:x0 + 64])

    def test_small_image_is_padded(self):
        rec, img, gt, m = scene_parts(n=4, W=50, H=40)
        c = sample_crop(rec, img, gt, m, CropSpec(size=64))
        assert c.image.shape == (64, 64, 3) and c.gt.shape == (64, 64) and c.masks.shape == (3, 64, 64)
        assert abs(c.gt.sum(dtype=np.float64) - gt.count) < 1e-4
        # reflection padding mirrors the image content
        assert np.array_equal(c.image[40, :50], img[38])

    def test_hflip(self):
        rec, img, gt, m = scene_parts(W=64, H=64)
        flipped = None
        for s in range(20):
            c = sample_crop(rec, img, gt, m, CropSpec(size=64, hflip=True), np.random.default_rng(s))
            if not np.array_equal(c.image, img):
                flipped = c
                break
        assert flipped is not None
        assert np.array_equal(flipped.image, img[:, ::-1]) and np.array_equal(flipped.gt, gt.values[:, ::-1])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([16, 25, 50]))
    def test_tile_mass_additivity(self, seed, tile):
        rec, img, gt, m = scene_parts(n=30, W=200, H=150, seed=seed)
        total = 0.0
        for y in range(0, 150, tile):
            for x in range(0, 200, tile):
                total += float(gt.values[y:y + tile, x:x + tile].sum(dtype=np.float64))
        assert abs(total - gt.count) <= 1e-3
        assert abs(gt.count - 30) <= 1e-4


class TestSynthetic:
    def test_deterministic_bytes(self):
        spec = SyntheticSceneSpec(n_heads=15, rng_seed=4)
        a, b = synth_generate(spec), synth_generate(spec)
        assert a.image.tobytes() == b.image.tobytes() and a.record == b.record
        assert synth_generate(SyntheticSceneSpec(n_heads=15, rng_seed=5)).image.tobytes() != a.image.tobytes()

    def test_no_heads(self):
        s = synth_generate(SyntheticSceneSpec(n_heads=0))
        assert s.record.heads == () and s.record.detections == () and s.image.shape == (256, 256, 3)

    def test_heads_inside_canvas(self):
        s = synth_generate(SyntheticSceneSpec(n_heads=40, size_range=(6, 30), rng_seed=2))
        for h, d in zip(s.record.heads, s.diameters):
            assert d / 2 <= h.x <= 256 - d / 2 and d / 2 <= h.y <= 256 - d / 2

    def test_density_round_trip(self):
        s = synth_generate(SyntheticSceneSpec(n_heads=33, size_range=(6, 20), rng_seed=7))
        assert abs(render_density(s.record).count - 33) <= 1e-4

    def test_two_cluster_size_recovery(self):
        spec = SyntheticSceneSpec(canvas=(256, 384), n_heads=40, size_range=(6, 60), layout="two-cluster",
                                  large_fraction=0.1, rng_seed=3)
        s = synth_generate(spec)
        est = estimate_record(s.record, SizeEstimatorConfig())
        for h, d in zip(est.heads, s.diameters):
            if d == 6:
                assert d / 2 <= h.eta <= d * 2
            else:
                assert abs(h.eta - d) <= 0.25 * d

    def test_unknown_layout(self):
        with pytest.raises(ValueError, match="layout"):
            synth_generate(SyntheticSceneSpec(layout="spiral"))

    def test_overfull(self):
        with pytest.raises(ValueError):
            synth_generate(SyntheticSceneSpec(n_heads=500, size_range=(30, 40)))

    def test_write_dataset(self, tmp_path):
        recs = write_synthetic_dataset(tmp_path, SyntheticSceneSpec(rng_seed=1, canvas=(64, 80),
                                                                    size_range=(4, 10)), 3, (2, 6))
        assert len(recs) == 3 and all(2 <= r.count <= 6 for r in recs)
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert [len(truth[r.image_id]) for r in recs] == [r.count for r in recs]
        assert (recs[0].width, recs[0].height) == (80, 64)


def test_split_train_val():
    tr, va = split_train_val(list(range(10)), 0.8, seed=1)
    assert len(tr) == 8 and len(va) == 2 and sorted(tr + va) == list(range(10))
    assert tr == sorted(tr) and split_train_val(list(range(10)), 0.8, seed=1) == (tr, va)


def test_pixel_stats():
    img = np.zeros((2, 2, 3), np.uint8)
    img[..., 0] = 255
    mean, std = pixel_stats([img])
    assert mean == pytest.approx([1.0, 0.0, 0.0]) and std[1] == pytest.approx(1e-6)
