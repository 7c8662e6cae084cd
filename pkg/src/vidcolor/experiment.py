"""Desk-scale benchmark: dataset, both training stages and the directional studies.

Everything is cached under ``<root>/<key>/`` where the key hashes the run and
dataset configs, so a finished benchmark is reused and an interrupted one
resumes from its last checkpoint. Run ``python3 -m vidcolor.experiment`` to
populate the cache ahead of the acceptance tests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ccf import enumerate_intervals
from .config import RunConfig
from .diffusion import Colorizer, colorize, load_checkpoint, train_stage1, train_stage2
from .lexicon import ACHROMATIC, COLOR_ANCHORS
from .metrics import cdc, color_histograms, hue_degrees, hue_distance, js_divergence, masked_mean_hue
from .synthvid import DatasetConfig, DatasetManifest, ShapeSpec, generate_clip, generate_dataset, render_masks

log = logging.getLogger(__name__)

BENCHMARK_CONFIG = RunConfig(
    lr=2e-4, warmup_steps=200, batch_size=8, stage1_steps=8000, stage2_steps=2000, ae_steps=1500, seed=0
)
BENCHMARK_DATA = DatasetConfig(seed=0, exclude_pairs=(("purple", "circle"),), creative_test_clips=4)
N_TRAIN, N_TEST = 200, 20
VARIANTS = {"full": True, "no_tda": False}


def benchmark_key(config: RunConfig, data: DatasetConfig) -> str:
    blob = json.dumps({"run": config.to_json(), "data": data.to_json(), "n": [N_TRAIN, N_TEST]}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class Benchmark:
    root: Path
    manifest: DatasetManifest
    checkpoints: dict[str, Path]

    def model(self, variant: str = "full") -> Colorizer:
        return load_checkpoint(self.checkpoints[variant]).build_model()


def _finished(path: Path, steps: int) -> bool:
    return path.exists() and load_checkpoint(path).step >= steps


def prepare_benchmark(
    root: str | Path, config: RunConfig = BENCHMARK_CONFIG, data: DatasetConfig = BENCHMARK_DATA, variants=tuple(VARIANTS)
) -> Benchmark:
    root = Path(root) / benchmark_key(config, data)
    manifest_path = root / "data" / "manifest.json"
    if not manifest_path.exists():
        generate_dataset(N_TRAIN, 0, N_TEST, data, root / "data")
    manifest = DatasetManifest.load(manifest_path)
    checkpoints = {}
    for variant in variants:
        cfg = config.updated(use_tda=VARIANTS[variant])
        out = root / variant
        out.mkdir(parents=True, exist_ok=True)
        s1, s2 = out / "stage1.ckpt", out / "stage2.ckpt"
        if not _finished(s1, cfg.stage1_steps):
            log.info("%s: stage 1", variant)
            train_stage1(manifest, cfg, s1, resume=s1 if s1.exists() else None, log_path=out / "train.jsonl")
        if not _finished(s2, cfg.stage2_steps):
            log.info("%s: stage 2", variant)
            train_stage2(
                manifest, s1, cfg, s2, resume=s2 if s2.exists() else None, log_path=out / "train.jsonl"
            )
        checkpoints[variant] = s2
    return Benchmark(root, manifest, checkpoints)


def colorize_split(model: Colorizer, manifest: DatasetManifest, split: str = "test", seed: int = 0, steps=None):
    """Colorize every clip of ``split`` from its luminance and caption; id -> (T, H, W, 3)."""
    preds = {}
    for k, entry in enumerate(manifest.split(split)):
        clip = manifest.load_clip(entry)
        preds[entry.id] = colorize(model, clip.luminance, clip.caption, seed=seed + k, steps=steps)
    return preds


@dataclass
class ShapeHue:
    clip: str
    color: str
    kind: str
    hue: float
    anchor_hue: float
    error: float
    creative: bool


def controllability(preds: dict, manifest: DatasetManifest, exclude_pairs=()) -> list[ShapeHue]:
    """Mean hue inside each chromatic shape's ground-truth mask vs its anchor hue."""
    creative = {tuple(p) for p in exclude_pairs}
    rows = []
    for entry in manifest.split("test"):
        specs = [ShapeSpec.from_json(s) for s in entry.shapes]
        video = preds[entry.id]
        masks = render_masks(specs, video.shape[0], video.shape[1:3])
        for spec, mask in zip(specs, masks):
            if spec.color_name in ACHROMATIC:
                continue
            hue = masked_mean_hue(video, mask)
            anchor = hue_degrees(COLOR_ANCHORS[spec.color_name])
            rows.append(
                ShapeHue(entry.id, spec.color_name, spec.kind, hue, anchor, hue_distance(hue, anchor),
                         (spec.color_name, spec.kind) in creative)
            )
    return rows


def hit_rate(rows: list[ShapeHue], tolerance: float = 30.0) -> float:
    return float(np.mean([r.error <= tolerance for r in rows])) if rows else float("nan")


def mean_cdc(preds: dict) -> float:
    return float(np.mean([cdc(v) for v in preds.values()]))


def seam_divergence(video: np.ndarray, clip_length: int) -> float:
    """Mean channel-averaged histogram JS divergence across consecutive-clip seams."""
    hists = color_histograms(video)  # (T, 3, bins)
    values = []
    for s in range(clip_length, video.shape[0], clip_length):
        values.append(np.mean([js_divergence(hists[s - 1, c], hists[s, c]) for c in range(3)]))
    return float(np.mean(values))


def long_video_study(model: Colorizer, n_videos: int = 4, length: int = 64, seed: int = 100, steps=None) -> dict:
    """CCF vs independent back-to-back clips on long synthetic videos."""
    data = DatasetConfig(clip_length=length, seed=seed)
    nf = model.config.clip_length
    out = {"cdc_ccf": [], "cdc_independent": [], "seam_ccf": [], "seam_independent": []}
    for k in range(n_videos):
        clip = generate_clip(seed + k, data)
        fused = colorize(model, clip.luminance, clip.caption, seed=k, steps=steps, intervals=enumerate_intervals(length))
        plain = colorize(model, clip.luminance, clip.caption, seed=k, steps=steps, intervals=[1])
        out["cdc_ccf"].append(cdc(fused))
        out["cdc_independent"].append(cdc(plain))
        out["seam_ccf"].append(seam_divergence(fused, nf))
        out["seam_independent"].append(seam_divergence(plain, nf))
    return out


def run_studies(bench: Benchmark, steps=None, long_videos: int = 4) -> dict:
    results_path = bench.root / f"studies_{steps or 'default'}_{long_videos}.json"
    if results_path.exists():
        return json.loads(results_path.read_text())
    full = bench.model("full")
    preds = colorize_split(full, bench.manifest, steps=steps)
    rows = controllability(preds, bench.manifest, BENCHMARK_DATA.exclude_pairs)
    results = {
        "shapes": [asdict(r) for r in rows],
        "hit_rate": hit_rate(rows),
        "creative_hit_rate": hit_rate([r for r in rows if r.creative]),
        "cdc_full": mean_cdc(preds),
    }
    if "no_tda" in bench.checkpoints:
        results["cdc_no_tda"] = mean_cdc(colorize_split(bench.model("no_tda"), bench.manifest, steps=steps))
    if long_videos:
        results["long"] = long_video_study(full, long_videos, steps=steps)
    results_path.write_text(json.dumps(results, indent=1))
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Train and evaluate the desk-scale benchmark.")
    parser.add_argument("--root", default=".artifacts", help="cache directory")
    parser.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    parser.add_argument("--no-studies", action="store_true", help="train only")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    bench = prepare_benchmark(args.root, variants=tuple(args.variants))
    if not args.no_studies:
        results = run_studies(bench)
        summary = {k: v for k, v in results.items() if k != "shapes"}
        print(json.dumps(summary, indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
