import json
import math
import shutil

import numpy as np
import pytest

from vidcolor.errors import ValidationError
from vidcolor.metrics import (
    MetricReport,
    cdc,
    color_histograms,
    colorfulness,
    evaluate_dataset,
    hue_degrees,
    hue_distance,
    js_divergence,
    masked_mean_hue,
    psnr,
    ssim,
)
from vidcolor.synthvid import DatasetConfig, generate_dataset


def _red_green():
    frame = np.zeros((4, 6, 3))
    frame[:2, :, 0] = 1.0
    frame[2:, :, 1] = 1.0
    return frame


class TestColorfulness:
    def test_grayscale_is_zero(self):
        g = np.random.default_rng(0).random((8, 8, 1))
        assert colorfulness(np.repeat(g, 3, axis=-1)) == 0.0

    def test_half_red_half_green_closed_form(self):
        # rg = +-255 (sigma 255, mean 0); yb = 127.5 everywhere
        assert abs(colorfulness(_red_green()) - (255 + 0.3 * 127.5)) <= 1e-6

    def test_pixel_permutation_invariance(self):
        rng = np.random.default_rng(1)
        frame = rng.random((8, 8, 3))
        flat = frame.reshape(-1, 3)[rng.permutation(64)].reshape(8, 8, 3)
        assert abs(colorfulness(frame) - colorfulness(flat)) <= 1e-9


class TestFidelity:
    def test_identity_caps(self):
        a = np.random.default_rng(2).random((16, 16, 3))
        assert psnr(a, a) == 100.0
        assert ssim(a, a) == 1.0

    def test_constant_offset_gives_20db(self):
        gt = 0.1 + 0.8 * np.random.default_rng(3).random((16, 16, 3))
        assert abs(psnr(gt + 0.1, gt) - 20.0) <= 1e-9

    def test_ssim_symmetric(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
        assert ssim(a, b) < 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
        with pytest.raises(ValidationError):
            ssim(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_psnr_decreases_with_noise(self):
        rng = np.random.default_rng(5)
        gt = 0.25 + 0.5 * rng.random((16, 16, 3))
        noise = rng.uniform(-1, 1, gt.shape)
        values = [psnr(gt + a * noise, gt) for a in (0.01, 0.05, 0.2)]
        assert values[0] > values[1] > values[2]


class TestCDC:
    def test_static_video_is_zero(self):
        frame = np.random.default_rng(6).random((8, 8, 3))
        assert cdc(np.stack([frame] * 6)) == 0.0

    def test_alternating_red_blue(self):
        red, blue = np.zeros((4, 4, 3)), np.zeros((4, 4, 3))
        red[..., 0] = 1.0
        blue[..., 2] = 1.0
        video = np.stack([red, blue] * 4)
        # k=1: JS = ln 2 on R and B, 0 on G -> 2 ln2 / 3; k = 2, 4: identical frames -> 0
        expected = 1000 * (2 * math.log(2) / 3) / 3
        assert abs(cdc(video) - expected) <= 1e-9

    def test_one_hot_js_is_ln2(self):
        p, q = np.eye(32)[0], np.eye(32)[31]
        assert abs(js_divergence(p, q) - math.log(2)) <= 1e-12

    def test_bounds_and_permutation_invariance(self):
        rng = np.random.default_rng(7)
        video = rng.random((7, 8, 8, 3))
        value = cdc(video)
        assert 0 <= value <= 1000 * math.log(2)
        perm = rng.permutation(64)
        shuffled = video.reshape(7, 64, 3)[:, perm].reshape(video.shape)
        assert abs(cdc(shuffled) - value) <= 1e-9

    def test_short_video_uses_valid_intervals(self):
        frames = np.random.default_rng(8).random((2, 4, 4, 3))
        assert cdc(frames) > 0
        with pytest.raises(ValidationError):
            cdc(frames[:1])

    def test_histograms_normalized(self):
        h = color_histograms(np.random.default_rng(9).random((3, 5, 5, 3)))
        assert h.shape == (3, 3, 32)
        np.testing.assert_allclose(h.sum(-1), 1.0)


class TestHue:
    def test_anchor_hues(self):
        assert hue_degrees((1.0, 0.0, 0.0)) == 0.0
        assert abs(hue_degrees((0.0, 0.0, 1.0)) - 240.0) < 1e-9

    def test_circular_distance(self):
        assert hue_distance(350.0, 10.0) == 20.0
        assert hue_distance(0.0, 180.0) == 180.0

    def test_masked_mean(self):
        video = np.zeros((2, 4, 4, 3))
        video[:, :2, :, 1] = 1.0  # green top half
        video[:, 2:, :, 0] = 1.0  # red bottom half
        mask = np.zeros((2, 4, 4))
        mask[:, :2] = 1.0
        assert abs(masked_mean_hue(video, mask) - 120.0) < 1e-9
        with pytest.raises(ValidationError):
            masked_mean_hue(video, np.zeros((2, 4, 4)))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    manifest = generate_dataset(1, 0, 2, DatasetConfig(seed=3), root / "data")
    pred = root / "pred"
    for e in manifest.split("test"):
        shutil.copytree(root / "data" / e.id, pred / e.id)
    return manifest, pred


class TestEvaluateDataset:
    def test_ground_truth_predictions(self, dataset):
        manifest, pred = dataset
        report = evaluate_dataset(pred, manifest)
        assert report.clip_ids == ["test_00000", "test_00001"]
        assert report.mean["psnr"] == 100.0 and report.mean["ssim"] == 1.0
        for e in manifest.split("test"):
            assert report.per_clip[e.id]["cdc"] == cdc(manifest.load_clip(e).frames)

    def test_means_are_averages_and_json_round_trip(self, dataset, tmp_path):
        manifest, pred = dataset
        report = evaluate_dataset(pred, manifest)
        for k, v in report.mean.items():
            assert v == pytest.approx(np.mean([c[k] for c in report.per_clip.values()]), abs=0)
        report.save(tmp_path / "r.json")
        data = json.loads((tmp_path / "r.json").read_text())
        assert set(data) == {"per_clip", "mean", "config"}
        assert MetricReport.from_json(data).to_json() == report.to_json()

    def test_missing_prediction_names_clip(self, dataset, tmp_path):
        manifest, pred = dataset
        partial = tmp_path / "partial"
        shutil.copytree(pred / "test_00000", partial / "test_00000")
        with pytest.raises(FileNotFoundError, match="test_00001"):
            evaluate_dataset(partial, manifest)

    def test_empty_split(self, dataset, tmp_path):
        manifest, _ = dataset
        report = evaluate_dataset(tmp_path, manifest, split="val")
        assert report.per_clip == {} and report.mean == {}
