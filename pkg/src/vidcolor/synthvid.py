"""Synthetic moving-shapes videos with procedural captions.

Each clip shows 1-3 anti-aliased shapes (circle, square, triangle) gliding
along straight trajectories over a neutral background while their size
breathes frame to frame. Captions read ``"a red circle and a blue square"``.
Datasets are written as PNG directories plus a ``manifest.json``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .lexicon import COLOR_ANCHORS, SHAPE_KINDS

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SPLITS = ("train", "val", "test")
MAX_PLACEMENT_ATTEMPTS = 100
MIN_VISIBLE_FRACTION = 0.3


class PlacementError(RuntimeError):
    pass


def to_luminance(frame: np.ndarray) -> np.ndarray:
    """BT.601 luma of RGB values in [0, 1]; keeps a trailing channel axis."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] != 3:
        raise ValidationError(f"expected trailing RGB axis, got shape {frame.shape}")
    if not np.all(np.isfinite(frame)) or frame.min() < 0.0 or frame.max() > 1.0:
        raise ValidationError("RGB values must lie in [0, 1]")
    return np.clip(frame @ LUMA_WEIGHTS, 0.0, 1.0)[..., None]


@dataclass
class ShapeSpec:
    kind: str
    color_name: str
    rgb: tuple[float, float, float]
    start: tuple[float, float]  # normalized (x, y) center at frame 0
    end: tuple[float, float]  # normalized (x, y) center at the last frame
    size: float  # normalized radius before scaling
    scale_curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValidationError(f"unknown shape kind {self.kind!r}")
        if COLOR_ANCHORS.get(self.color_name) != tuple(self.rgb):
            raise ValidationError(f"rgb does not match lexicon entry for {self.color_name!r}")
        for x, y in (self.start, self.end):
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValidationError("trajectory must keep the center inside the frame")
        if any(not 0.5 <= s <= 1.5 for s in self.scale_curve):
            raise ValidationError("scale_curve entries must lie in [0.5, 1.5]")

    def center(self, k: int, n_frames: int) -> tuple[float, float]:
        u = k / (n_frames - 1) if n_frames > 1 else 0.0
        return (
            self.start[0] + u * (self.end[0] - self.start[0]),
            self.start[1] + u * (self.end[1] - self.start[1]),
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> ShapeSpec:
        return cls(
            kind=data["kind"],
            color_name=data["color_name"],
            rgb=tuple(data["rgb"]),
            start=tuple(data["start"]),
            end=tuple(data["end"]),
            size=data["size"],
            scale_curve=list(data["scale_curve"]),
        )


@dataclass
class VideoClip:
    frames: np.ndarray  # (N, H, W, 3)
    luminance: np.ndarray  # (N, H, W, 1)
    caption: str
    shape_specs: list[ShapeSpec] = field(default_factory=list)
    background: float = 0.0

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or len(self.frames) < 1:
            raise ValidationError(f"frames must be (N>=1, H, W, 3), got {self.frames.shape}")
        if self.luminance.shape != self.frames.shape[:-1] + (1,):
            raise ValidationError("luminance shape does not match frames")
        if np.abs(self.luminance - to_luminance(self.frames)).max() > 1e-6:
            raise ValidationError("luminance is not the BT.601 conversion of frames")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @classmethod
    def from_frames(cls, frames, caption, shape_specs=(), background=0.0) -> VideoClip:
        frames = np.asarray(frames, dtype=np.float64)
        return cls(frames, to_luminance(frames), caption, list(shape_specs), background)


@dataclass
class DatasetConfig:
    frame_size: tuple[int, int] = (32, 32)
    clip_length: int = 8
    shape_count: int | None = None  # None draws 1..max_shapes per clip
    max_shapes: int = 3
    exclude_pairs: tuple[tuple[str, str], ...] = ()  # (color, kind) kept out of train/val
    seed: int = 0
    creative_test_clips: int = 0  # leading test clips forced to show an excluded pair

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        self.exclude_pairs = tuple(tuple(p) for p in self.exclude_pairs)
        if self.clip_length < 2:
            raise ValidationError("clip_length must be >= 2")
        if min(self.frame_size) < 8:
            raise ValidationError("frame_size must be at least 8x8")
        if not 1 <= self.max_shapes <= 3:
            raise ValidationError("max_shapes must be in [1, 3]")
        if self.shape_count is not None and not 1 <= self.shape_count <= 3:
            raise ValidationError("shape_count must be in [1, 3]")
        if self.creative_test_clips and not self.exclude_pairs:
            raise ValidationError("creative_test_clips needs at least one excluded pair")

    def to_json(self) -> dict:
        return {
            "frame_size": list(self.frame_size),
            "clip_length": self.clip_length,
            "shape_count": self.shape_count,
            "max_shapes": self.max_shapes,
            "exclude_pairs": [list(p) for p in self.exclude_pairs],
            "seed": self.seed,
            "creative_test_clips": self.creative_test_clips,
        }

    @classmethod
    def from_json(cls, data: dict) -> DatasetConfig:
        return cls(**data)


def caption_for(shapes: list[ShapeSpec]) -> str:
    return " and ".join(f"a {s.color_name} {s.kind}" for s in shapes)


def _signed_distance(kind: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    """Signed distance in pixels from a shape of radius ``r`` centered at the origin."""
    if kind == "circle":
        return np.hypot(dx, dy) - r
    if kind == "square":
        half = 0.85 * r
        qx, qy = np.abs(dx) - half, np.abs(dy) - half
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        return outside + np.minimum(np.maximum(qx, qy), 0.0)
    # equilateral triangle pointing up; image y grows downward
    k = math.sqrt(3.0)
    side = 1.1 * r
    px = np.abs(dx) - side
    py = -dy + side / k
    flip = px + k * py > 0.0
    px, py = (
        np.where(flip, (px - k * py) / 2.0, px),
        np.where(flip, (-k * px - py) / 2.0, py),
    )
    px = px - np.clip(px, -2.0 * side, 0.0)
    return -np.hypot(px, py) * np.sign(py)


def shape_alpha(spec: ShapeSpec, k: int, n_frames: int, frame_size: tuple[int, int]) -> np.ndarray:
    """Anti-aliased coverage of one shape in frame ``k`` (H, W) in [0, 1]."""
    h, w = frame_size
    cx, cy = spec.center(k, n_frames)
    scale = spec.scale_curve[k] if spec.scale_curve else 1.0
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    r = spec.size * min(h, w) * scale
    sdf = _signed_distance(spec.kind, xs - cx * w, ys - cy * h, r)
    return np.clip(0.5 - sdf, 0.0, 1.0)


def render_masks(shapes: list[ShapeSpec], n_frames: int, frame_size) -> np.ndarray:
    """Visible coverage per shape after occlusion: (S, N, H, W).

    Shapes are painted in list order, so later shapes occlude earlier ones.
    """
    frame_size = tuple(frame_size)
    alphas = np.stack(
        [np.stack([shape_alpha(s, k, n_frames, frame_size) for k in range(n_frames)]) for s in shapes]
    ) if shapes else np.zeros((0, n_frames) + frame_size)
    visible = alphas.copy()
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            visible[i] *= 1.0 - alphas[j]
    return visible


def render_frames(shapes: list[ShapeSpec], n_frames: int, frame_size, background: float) -> np.ndarray:
    h, w = frame_size
    frames = np.full((n_frames, h, w, 3), background, dtype=np.float64)
    for spec in shapes:
        rgb = np.asarray(spec.rgb)
        for k in range(n_frames):
            a = shape_alpha(spec, k, n_frames, (h, w))[..., None]
            frames[k] = (1.0 - a) * frames[k] + a * rgb
    return np.clip(frames, 0.0, 1.0)


def _sample_trajectory(rng: np.random.Generator, n_frames: int, size: float):
    margin = 0.2
    while True:
        start = rng.uniform(margin, 1.0 - margin, size=2)
        end = rng.uniform(margin, 1.0 - margin, size=2)
        if np.hypot(*(end - start)) >= 0.15:
            break
    amp = rng.uniform(0.1, 0.3)
    freq = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    u = np.arange(n_frames) / max(n_frames - 1, 1)
    scale = 1.0 + amp * np.sin(2.0 * math.pi * freq * u + phase)
    return tuple(start.tolist()), tuple(end.tolist()), [float(s) for s in scale]


def _visible_enough(shapes, n_frames, frame_size) -> bool:
    visible = render_masks(shapes, n_frames, frame_size)
    for i, spec in enumerate(shapes):
        for k in range(n_frames):
            own = shape_alpha(spec, k, n_frames, frame_size).sum()
            if visible[i, k].sum() < MIN_VISIBLE_FRACTION * own:
                return False
    return True


def generate_clip(
    seed: int,
    config: DatasetConfig | None = None,
    *,
    exclude_pairs=(),
    require: tuple[str, str] | None = None,
) -> VideoClip:
    """Draw one clip deterministically from ``seed``.

    ``require`` forces a (color, kind) pair as the first shape; ``exclude_pairs``
    lists (color, kind) pairs that must not appear.
    """
    config = config or DatasetConfig()
    rng = np.random.default_rng(seed)
    n = config.clip_length
    count = config.shape_count or int(rng.integers(1, config.max_shapes + 1))
    excluded = {tuple(p) for p in exclude_pairs}
    if require is not None and tuple(require) in excluded:
        raise ValidationError(f"required pair {require} is excluded")

    colors = list(COLOR_ANCHORS)
    while True:
        kinds = [SHAPE_KINDS[i] for i in rng.permutation(len(SHAPE_KINDS))[:count]]
        names = [colors[i] for i in rng.permutation(len(colors))[:count]]
        if require is not None:
            color, kind = require
            if kind in kinds:
                kinds.remove(kind)
            else:
                kinds.pop()
            if color in names:
                names.remove(color)
            else:
                names.pop()
            kinds.insert(0, kind)
            names.insert(0, color)
        if not any((c, k) in excluded for c, k in zip(names, kinds)):
            break

    background = float(rng.uniform(0.15, 0.25))
    sizes = rng.uniform(0.12, 0.18, size=count)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        shapes = []
        for kind, name, size in zip(kinds, names, sizes):
            start, end, scale = _sample_trajectory(rng, n, float(size))
            shapes.append(ShapeSpec(kind, name, COLOR_ANCHORS[name], start, end, float(size), scale))
        if _visible_enough(shapes, n, config.frame_size):
            break
    else:
        raise PlacementError(
            f"could not place {count} shapes without heavy overlap after "
            f"{MAX_PLACEMENT_ATTEMPTS} attempts (seed={seed})"
        )

    frames = render_frames(shapes, n, config.frame_size, background)
    return VideoClip(frames, to_luminance(frames), caption_for(shapes), shapes, background)


def clip_seed(base_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([base_seed, SPLITS.index(split), index])
    return int(ss.generate_state(1)[0])


@dataclass
class ManifestEntry:
    id: str
    caption: str
    split: str
    frames: list[str]
    shapes: list[dict] = field(default_factory=list)
    background: float | None = None

    def to_json(self) -> dict:
        data = {"id": self.id, "caption": self.caption, "split": self.split, "frames": self.frames}
        if self.shapes:
            data["shapes"] = self.shapes
        if self.background is not None:
            data["background"] = self.background
        return data


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    frame_size: tuple[int, int]
    clip_length: int
    config: dict | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> dict:
        data = {
            "frame_size": list(self.frame_size),
            "clip_length": self.clip_length,
            "entries": [e.to_json() for e in self.entries],
        }
        if self.config is not None:
            data["config"] = self.config
        return data

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        try:
            path.write_text(json.dumps(self.to_json(), indent=1))
        except OSError as exc:
            raise OSError(f"failed to write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        data = json.loads(path.read_text())
        entries = [
            ManifestEntry(
                id=e["id"],
                caption=e["caption"],
                split=e["split"],
                frames=list(e["frames"]),
                shapes=list(e.get("shapes", [])),
                background=e.get("background"),
            )
            for e in data["entries"]
        ]
        return cls(path.parent, entries, tuple(data["frame_size"]), int(data["clip_length"]), data.get("config"))

    def load_clip(self, entry: ManifestEntry | str) -> VideoClip:
        if isinstance(entry, str):
            entry = next(e for e in self.entries if e.id == entry)
        frames = np.stack([read_png(Path(self.root) / p) for p in entry.frames])
        specs = [ShapeSpec.from_json(s) for s in entry.shapes]
        return VideoClip(frames, to_luminance(frames), entry.caption, specs, entry.background or 0.0)


def write_png(path: Path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.ndim == 3 and data.shape[-1] == 1:
        data = data[..., 0]
    try:
        Image.fromarray(data).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed to write frame {path}: {exc}") from exc


def read_png(path: Path) -> np.ndarray:
    """Load an 8-bit PNG as float RGB in [0, 1]; grayscale is replicated."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_clip_frames(frames: np.ndarray, clip_dir: Path) -> list[Path]:
    clip_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(frames):
        p = clip_dir / f"frame_{k:04d}.png"
        write_png(p, frame)
        paths.append(p)
    return paths


def generate_dataset(
    n_train: int,
    n_val: int,
    n_test: int,
    config: DatasetConfig | None = None,
    out_dir: str | Path = "data",
) -> DatasetManifest:
    config = config or DatasetConfig()
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if any(c < 0 for c in counts.values()):
        raise ValidationError("clip counts must be non-negative")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    entries = []
    for split in SPLITS:
        excluded = config.exclude_pairs if split != "test" else ()
        for i in range(counts[split]):
            clip_id = f"{split}_{i:05d}"
            require = None
            if split == "test" and i < config.creative_test_clips:
                require = config.exclude_pairs[i % len(config.exclude_pairs)]
            clip = generate_clip(clip_seed(config.seed, split, i), config, exclude_pairs=excluded, require=require)
            paths = write_clip_frames(clip.frames, out_dir / clip_id)
            entries.append(
                ManifestEntry(
                    id=clip_id,
                    caption=clip.caption,
                    split=split,
                    frames=[os.path.relpath(p, out_dir) for p in paths],
                    shapes=[s.to_json() for s in clip.shape_specs],
                    background=clip.background,
                )
            )
    manifest = DatasetManifest(out_dir, entries, config.frame_size, config.clip_length, config.to_json())
    if entries:
        manifest.save()
    return manifest
