"""Cross-clip fusion for videos longer than one clip.

A long video is covered by skip-window clips at power-of-two frame intervals.
Each frame's features are the weighted mean of the features it received in
every clip containing it, with weights that peak at the clip center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError


@dataclass(frozen=True)
class ClipWindow:
    interval: int
    frame_indices: tuple[int, ...]

    @property
    def center(self) -> float:
        return (self.frame_indices[0] + self.frame_indices[-1]) / 2.0


@dataclass
class Membership:
    clip: int
    position: int
    weight: float


@dataclass
class FusionPlan:
    video_length: int
    clip_length: int
    intervals: list[int]
    clips: list[ClipWindow]
    memberships: list[list[Membership]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "video_length": self.video_length,
            "clip_length": self.clip_length,
            "intervals": self.intervals,
            "clips": [
                {"id": j, "interval": c.interval, "frames": list(c.frame_indices), "center": c.center}
                for j, c in enumerate(self.clips)
            ],
            "memberships": [
                [{"clip": m.clip, "position": m.position, "weight": m.weight} for m in ms]
                for ms in self.memberships
            ],
        }

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def enumerate_intervals(video_length: int) -> list[int]:
    """1, 2, 4, ... up to the largest power of two strictly below ``video_length``."""
    if video_length < 2:
        raise ValidationError("video length must be at least 2")
    out, d = [], 1
    while d < video_length:
        out.append(d)
        d *= 2
    return out


def raw_weight(position: int, clip_length: int) -> float:
    return clip_length / 2.0 - abs(position - (clip_length - 1) / 2.0)


def build_fusion_plan(video_length: int, clip_length: int, intervals=None) -> FusionPlan:
    if video_length < clip_length:
        raise ValidationError(f"video length {video_length} is shorter than clip length {clip_length}")
    if intervals is None:
        intervals = enumerate_intervals(video_length) if video_length >= 2 else [1]
    clips: list[ClipWindow] = []
    for d in intervals:
        for r in range(d):
            strided = list(range(r, video_length, d))
            if len(strided) < clip_length:
                continue
            for s in range(0, len(strided), clip_length):
                chunk = strided[s : s + clip_length]
                if len(chunk) < clip_length:
                    chunk = strided[-clip_length:]
                clips.append(ClipWindow(d, tuple(chunk)))

    raw: list[list[tuple[int, int, float]]] = [[] for _ in range(video_length)]
    for j, clip in enumerate(clips):
        for pos, i in enumerate(clip.frame_indices):
            raw[i].append((j, pos, raw_weight(pos, clip_length)))
    memberships = []
    for i, entries in enumerate(raw):
        if not entries:
            raise ValidationError(f"frame {i} is not covered by any clip")
        total = sum(w for _, _, w in entries)
        memberships.append([Membership(j, pos, w / total) for j, pos, w in entries])
    return FusionPlan(video_length, clip_length, list(intervals), clips, memberships)


def fuse_features(per_clip_features, plan: FusionPlan):
    """Weighted per-frame fusion of clip features.

    ``per_clip_features`` maps clip id to an (N^f, ...) array or tensor, or is a
    sequence/stacked tensor indexed by clip id. Returns (T, ...).
    """
    def features_of(j):
        try:
            return per_clip_features[j]
        except (KeyError, IndexError):
            raise ValidationError(f"missing features for clip {j}") from None

    for j in range(len(plan.clips)):
        f = features_of(j)
        if f.shape[0] != plan.clip_length:
            raise ValidationError(f"clip {j} features have {f.shape[0]} frames, expected {plan.clip_length}")

    out = []
    for ms in plan.memberships:
        acc = None
        for m in sorted(ms, key=lambda m: m.clip):
            term = m.weight * features_of(m.clip)[m.position]
            acc = term if acc is None else acc + term
        out.append(acc)
    if isinstance(out[0], torch.Tensor):
        return torch.stack(out)
    return np.stack(out)


class FusionOperator:
    """Vectorized fusion and redistribution for batched clip tensors.

    Clip features arrive stacked as (J, N^f, ...). ``fuse`` returns per-frame
    features (T, ...); ``scatter`` rebuilds (J, N^f, ...) from them.
    """

    def __init__(self, plan: FusionPlan):
        self.plan = plan
        rows, cols, weights = [], [], []
        n = plan.clip_length
        for i, ms in enumerate(plan.memberships):
            for m in sorted(ms, key=lambda m: m.clip):
                rows.append(i)
                cols.append(m.clip * n + m.position)
                weights.append(m.weight)
        self.matrix = torch.zeros(plan.video_length, len(plan.clips) * n, dtype=torch.float64)
        self.matrix[rows, cols] = torch.tensor(weights, dtype=torch.float64)
        self.index = torch.tensor([list(c.frame_indices) for c in plan.clips], dtype=torch.long)

    def fuse(self, clip_features: torch.Tensor) -> torch.Tensor:
        j, n = clip_features.shape[:2]
        flat = clip_features.reshape(j * n, -1)
        fused = self.matrix.to(flat.dtype) @ flat
        return fused.reshape((self.plan.video_length,) + clip_features.shape[2:])

    def scatter(self, frame_features: torch.Tensor) -> torch.Tensor:
        return frame_features[self.index]

    def __call__(self, clip_features: torch.Tensor) -> torch.Tensor:
        return self.scatter(self.fuse(clip_features))


def ccf_denoise_pass(latents, denoiser, plan: FusionPlan, timestep: int, context, context_mask, y_lum, operator=None):
    """One fused noise prediction per frame for a long video.

    ``latents`` (T, C, h, w) and ``y_lum`` (T, C_lum, h, w) are split into the
    plan's clips, the denoiser runs on all clips as one batch, and each TDA
    block's output is fused across clips before the pass continues. ``context``
    holds one caption embedding per clip, (J, N, D).
    """
    op = operator or FusionOperator(plan)
    clip_z = op.scatter(latents)
    clip_y = op.scatter(y_lum)
    t = torch.full((len(plan.clips),), int(timestep), dtype=torch.long)
    eps = denoiser(clip_z, t, context, clip_y, context_mask, tda_hook=op)
    return op.fuse(eps)
