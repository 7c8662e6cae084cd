"""Run configuration shared by training, sampling and the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

_TUPLE_FIELDS = ("frame_size", "ae_widths", "unet_widths", "adam_betas")


@dataclass
class RunConfig:
    # data
    frame_size: tuple[int, int] = (32, 32)
    clip_length: int = 8
    # model
    latent_channels: int = 4
    lum_channels: int = 32
    ae_widths: tuple[int, int, int] = (32, 64, 64)
    text_dim: int = 64
    unet_widths: tuple[int, int] = (64, 128)
    heads: int = 4
    alpha: float = 4.0
    rate_spatial: int = 2
    rate_temporal: int = 2
    cmpf_blocks: int = 2
    use_tda: bool = True
    lexicon: str | None = None
    # diffusion
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sampler_steps: int = 50
    # optimization
    lr: float = 1e-5
    adam_betas: tuple[float, float] = (0.99, 0.999)
    weight_decay: float = 1e-4
    warmup_steps: int = 0
    grad_clip: float = 1.0
    batch_size: int = 4
    stage1_steps: int = 4000
    stage2_steps: int = 1000
    ae_steps: int = 1500
    ae_lr: float = 1e-3
    ae_batch_size: int = 32
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            setattr(self, name, tuple(getattr(self, name)))

    def validate(self) -> RunConfig:
        h, w = self.frame_size
        problems = []
        if h % 8 or w % 8:
            problems.append("frame_size must be divisible by 8 (4x latent downsample, then one U-Net level)")
        if self.clip_length < 1:
            problems.append("clip_length must be >= 1")
        if self.rate_spatial < 1 or self.rate_spatial > min(h, w) // 4:
            problems.append("rate_spatial must be in [1, latent size]")
        if self.rate_temporal < 1 or self.rate_temporal > self.clip_length:
            problems.append("rate_temporal must be in [1, clip_length]")
        if self.alpha < 0:
            problems.append("alpha must be non-negative")
        for width in self.unet_widths:
            if width % self.heads:
                problems.append(f"U-Net width {width} is not divisible by {self.heads} heads")
        if self.text_dim % self.heads:
            problems.append("text_dim must be divisible by heads")
        if self.lum_channels % self.heads:
            problems.append("lum_channels must be divisible by heads")
        if not 0 < self.beta_start < self.beta_end < 1:
            problems.append("need 0 < beta_start < beta_end < 1")
        if self.sampler_steps < 1 or self.diffusion_steps < 2:
            problems.append("step counts must be positive")
        if self.lr <= 0 or self.ae_lr <= 0:
            problems.append("learning rates must be positive")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if problems:
            raise ValidationError("; ".join(problems))
        return self

    def to_json(self) -> dict:
        data = dataclasses.asdict(self)
        for name in _TUPLE_FIELDS:
            data[name] = list(data[name])
        return data

    @classmethod
    def from_json(cls, data: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_json(json.loads(Path(path).read_text()))

    def updated(self, **overrides) -> RunConfig:
        data = self.to_json()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_json(data)
