"""Frame and video quality metrics: colorfulness, PSNR, SSIM and CDC."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import jensenshannon
from skimage.metrics import structural_similarity

from .errors import ValidationError
from .synthvid import DatasetManifest, read_png, to_luminance

PSNR_CAP = 100.0
CDC_BINS = 32
CDC_INTERVALS = (1, 2, 4)
CDC_SCALE = 1000.0


def colorfulness(frame: np.ndarray) -> float:
    """Hasler-Suesstrunk colorfulness of an RGB frame in [0, 1] (0-255 scale)."""
    rgb = np.asarray(frame, dtype=np.float64).reshape(-1, 3) * 255.0
    r, g, b = rgb.T
    rg = r - g
    yb = 0.5 * (r + g) - b
    return float(np.hypot(rg.std(), yb.std()) + 0.3 * np.hypot(rg.mean(), yb.mean()))


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(pred, gt) -> float:
    """SSIM on BT.601 luma with an 11x11 Gaussian window (sigma 1.5).

    Accepts single frames (H, W, 3) or stacks (..., H, W, 3); stacks are
    averaged frame by frame.
    """
    pred, gt = _check_pair(pred, gt)
    if pred.shape[-1] == 3:
        pred, gt = to_luminance(np.clip(pred, 0, 1))[..., 0], to_luminance(np.clip(gt, 0, 1))[..., 0]
    if pred.ndim > 2:
        flat_p = pred.reshape((-1,) + pred.shape[-2:])
        flat_g = gt.reshape((-1,) + gt.shape[-2:])
        return float(np.mean([ssim(p, g) for p, g in zip(flat_p, flat_g)]))
    return float(
        structural_similarity(
            pred, gt, data_range=1.0, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, K1=0.01, K2=0.03,
        )
    )


def hue_degrees(rgb) -> float:
    """HSV hue of one RGB triple in degrees, [0, 360)."""
    return 360.0 * colorsys.rgb_to_hsv(*(float(v) for v in rgb))[0]


def hue_distance(a: float, b: float) -> float:
    """Angular distance between two hues in degrees, [0, 180]."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def masked_mean_hue(video: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> float:
    """Hue of the mean color over pixels where ``mask`` exceeds ``threshold``.

    ``video`` is (T, H, W, 3) and ``mask`` is (T, H, W) coverage in [0, 1].
    """
    sel = np.asarray(mask) > threshold
    if not sel.any():
        raise ValidationError("mask selects no pixels")
    return hue_degrees(np.asarray(video)[sel].mean(axis=0))


def color_histograms(video: np.ndarray, bins: int = CDC_BINS) -> np.ndarray:
    """Normalized per-channel histograms, (T, 3, bins)."""
    video = np.asarray(video, dtype=np.float64)
    idx = np.clip((video * bins).astype(np.int64), 0, bins - 1)
    t = video.shape[0]
    hist = np.zeros((t, 3, bins))
    for k in range(t):
        for c in range(3):
            hist[k, c] = np.bincount(idx[k, ..., c].ravel(), minlength=bins)
    return hist / hist.sum(axis=-1, keepdims=True)


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence with natural log."""
    return float(jensenshannon(p, q) ** 2)


def cdc(video: np.ndarray, bins: int = CDC_BINS, intervals=CDC_INTERVALS) -> float:
    """Color distribution consistency, scaled by 1000. Lower is steadier."""
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise ValidationError(f"expected (T, H, W, 3) video, got {video.shape}")
    t = video.shape[0]
    usable = [k for k in intervals if k < t]
    if not usable:
        raise ValidationError(f"video of {t} frames has no valid frame pair")
    hist = color_histograms(video, bins)
    per_interval = []
    for k in usable:
        pairs = [
            np.mean([js_divergence(hist[i, c], hist[i + k, c]) for c in range(3)]) for i in range(t - k)
        ]
        per_interval.append(np.mean(pairs))
    return CDC_SCALE * float(np.mean(per_interval))


@dataclass
class MetricReport:
    per_clip: dict[str, dict[str, float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def clip_ids(self) -> list[str]:
        return list(self.per_clip)

    @property
    def mean(self) -> dict[str, float]:
        if not self.per_clip:
            return {}
        keys = next(iter(self.per_clip.values())).keys()
        return {k: float(np.mean([v[k] for v in self.per_clip.values()])) for k in keys}

    def to_json(self) -> dict:
        return {"per_clip": self.per_clip, "mean": self.mean, "config": self.config}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, data: dict) -> MetricReport:
        return cls(per_clip={k: dict(v) for k, v in data["per_clip"].items()}, config=dict(data.get("config", {})))


def clip_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    return {
        "colorfulness": float(np.mean([colorfulness(f) for f in pred])),
        "psnr": float(np.mean([psnr(p, g) for p, g in zip(pred, gt)])),
        "ssim": ssim(pred, gt),
        "cdc": cdc(pred),
    }


def evaluate_dataset(pred_dir: str | Path, manifest: DatasetManifest | str | Path, split: str = "test") -> MetricReport:
    """Score predicted frames stored as ``<pred_dir>/<clip_id>/frame_<k>.png``."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    pred_dir = Path(pred_dir)
    report = MetricReport(config={"pred_dir": str(pred_dir), "data": str(manifest.root), "split": split,
                                  "cdc_bins": CDC_BINS, "cdc_intervals": list(CDC_INTERVALS)})
    for entry in manifest.split(split):
        gt = manifest.load_clip(entry).frames
        paths = [pred_dir / entry.id / Path(p).name for p in entry.frames]
        missing = [p for p in paths if not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing prediction for clip {entry.id}: {missing[0]}")
        pred = np.stack([read_png(p) for p in paths])
        report.per_clip[entry.id] = clip_metrics(pred, gt)
    return report
