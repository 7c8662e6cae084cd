"""Autoencoder pre-training and the two diffusion training stages.

Stage 1 fits the denoiser and the caption embedder with raw embeddings.
Stage 2 freezes everything except the pre-fusion stack and fits it through
the frozen denoiser with the same noise-prediction loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..config import RunConfig
from ..errors import NumericalError, ValidationError
from ..synthvid import DatasetManifest
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import Colorizer, parameter_hash
from .schedule import add_noise

log = logging.getLogger(__name__)


@dataclass
class ClipData:
    frames: torch.Tensor  # (n, F, 3, H, W)
    lum: torch.Tensor  # (n, F, 1, H, W)
    captions: list[str]
    ids: list[str]

    def __len__(self):
        return len(self.captions)


def clips_to_tensors(clips) -> ClipData:
    frames = torch.from_numpy(np.stack([c.frames for c in clips])).float().permute(0, 1, 4, 2, 3)
    lum = torch.from_numpy(np.stack([c.luminance for c in clips])).float().permute(0, 1, 4, 2, 3)
    return ClipData(frames.contiguous(), lum.contiguous(), [c.caption for c in clips], [str(i) for i in range(len(clips))])


def load_split(manifest: DatasetManifest, split: str = "train") -> ClipData:
    entries = manifest.split(split)
    if not entries:
        raise ValidationError(f"split {split!r} of {manifest.root} is empty")
    data = clips_to_tensors([manifest.load_clip(e) for e in entries])
    data.ids = [e.id for e in entries]
    return data


@dataclass
class LatentData:
    z0: torch.Tensor  # (n, F, C, h, w)
    y_lum: torch.Tensor  # (n, F, C_lum, h, w)
    captions: list[str]

    def __len__(self):
        return len(self.captions)


@torch.no_grad()
def prepare_latents(model: Colorizer, clips: ClipData, chunk: int = 16) -> LatentData:
    zs, ys = [], []
    for s in range(0, len(clips), chunk):
        zs.append(model.encode_frames(clips.frames[s : s + chunk]))
        ys.append(model.luminance_features(clips.lum[s : s + chunk])[0])
    return LatentData(torch.cat(zs), torch.cat(ys), list(clips.captions))


def _append_log(path, record):
    if path is not None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def train_autoencoder(model: Colorizer, clips: ClipData, config: RunConfig, log_path=None) -> dict:
    """Fit encoder, luminance encoder and decoder on color-frame reconstruction."""
    ae = model.ae
    frames = clips.frames.flatten(0, 1)
    lum = clips.lum.flatten(0, 1)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.AdamW(ae.parameters(), lr=config.ae_lr, weight_decay=config.weight_decay)
    ae.train()
    loss_value = float("nan")
    for step in range(config.ae_steps):
        lr = config.ae_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(config.ae_steps, 1)))
        for g in opt.param_groups:
            g["lr"] = lr
        idx = torch.randint(len(frames), (config.ae_batch_size,), generator=gen)
        recon = ae.reconstruct(frames[idx], lum[idx])
        loss = F.mse_loss(recon, frames[idx])
        if not torch.isfinite(loss):
            raise NumericalError(f"autoencoder loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        loss_value = loss.item()
        if step % 50 == 0 or step == config.ae_steps - 1:
            _append_log(log_path, {"step": step, "loss": loss_value, "stage": "ae"})
            log.info("ae step %d loss %.5f", step, loss_value)
    ae.zero_grad(set_to_none=True)
    ae.eval()
    with torch.no_grad():
        raw = torch.cat([ae.encoder(frames[s : s + 256])[0] for s in range(0, len(frames), 256)])
        ae.latent_scale.fill_(1.0 / raw.std().clamp_min(1e-6).item())
    return {"final_loss": loss_value, "latent_scale": ae.latent_scale.item()}


class DiffusionTrainer:
    """Single-writer optimization loop for stage 1 or stage 2."""

    def __init__(
        self,
        model: Colorizer,
        data: LatentData,
        stage: int,
        config: RunConfig,
        *,
        step: int = 0,
        generator: torch.Generator | None = None,
        log_path=None,
    ):
        if stage not in (1, 2):
            raise ValidationError("stage must be 1 or 2")
        if len(data) == 0:
            raise ValidationError("training split is empty")
        self.model = model
        self.data = data
        self.stage = stage
        self.config = config
        self.step = step
        self.log_path = log_path
        self.generator = generator or torch.Generator().manual_seed(config.seed + 10 * stage)
        for name, p in model.named_parameters():
            p.grad = None
            p.requires_grad_(name.split(".")[0] in self.trainable_prefixes)
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(
            self.params, lr=config.lr, betas=config.adam_betas, weight_decay=config.weight_decay
        )
        self.frozen_hash = parameter_hash(model) if stage == 2 else None
        self.header_extra: dict = {}

    @property
    def trainable_prefixes(self) -> tuple[str, ...]:
        return ("denoiser", "text") if self.stage == 1 else ("cmpf",)

    def sample_batch(self):
        b = self.config.batch_size
        idx = torch.randint(len(self.data), (b,), generator=self.generator)
        t = torch.randint(self.model.schedule.num_steps, (b,), generator=self.generator)
        noise = torch.randn(self.data.z0[idx].shape, generator=self.generator)
        return idx, t, noise

    def batch_loss(self, idx, t, noise) -> torch.Tensor:
        z0 = self.data.z0[idx]
        y_lum = self.data.y_lum[idx]
        captions = [self.data.captions[i] for i in idx.tolist()]
        z_t, _ = add_noise(z0, t, self.model.schedule, noise=noise)
        context, pad = self.model.text_condition(captions, y_lum, use_cmpf=self.stage == 2)
        eps = self.model.predict_noise(z_t, t, context, pad, y_lum)
        return F.mse_loss(eps, noise)

    def train_step(self) -> float:
        self.model.train()
        if self.config.warmup_steps:
            scale = min(1.0, (self.step + 1) / self.config.warmup_steps)
            for g in self.optimizer.param_groups:
                g["lr"] = self.config.lr * scale
        idx, t, noise = self.sample_batch()
        loss = self.batch_loss(idx, t, noise)
        if not torch.isfinite(loss):
            raise NumericalError(f"stage-{self.stage} loss is not finite at step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        for name, p in self.model.named_parameters():
            if p.grad is not None:
                assert p.requires_grad and name.split(".")[0] in self.trainable_prefixes, (
                    f"stage {self.stage} attempted to update frozen parameter {name}"
                )
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.params, self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        value = loss.item()
        _append_log(self.log_path, {"step": self.step, "loss": value, "stage": self.stage})
        return value

    def run(self, until_step: int, checkpoint_path=None, checkpoint_every: int = 0) -> list[float]:
        losses = []
        while self.step < until_step:
            losses.append(self.train_step())
            if self.step % 100 == 0:
                log.info("stage %d step %d loss %.5f", self.stage, self.step, losses[-1])
            if checkpoint_path and checkpoint_every and self.step % checkpoint_every == 0:
                self.save(checkpoint_path)
        if self.stage == 2:
            assert parameter_hash(self.model) == self.frozen_hash, "frozen weights changed during stage 2"
        self.model.eval()
        return losses

    def save(self, path) -> Path:
        header = {"frozen_hash": parameter_hash(self.model), **self.header_extra}
        return save_checkpoint(
            path, self.model, step=self.step, stage=self.stage,
            optimizer=self.optimizer, generator=self.generator, extra=header,
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, data: LatentData, log_path=None, model=None) -> DiffusionTrainer:
        model = model or ckpt.build_model()
        gen = torch.Generator()
        ckpt.restore_generator(gen)
        trainer = cls(model, data, ckpt.stage, ckpt.config, step=ckpt.step, generator=gen, log_path=log_path)
        ckpt.restore_optimizer(trainer.optimizer, model)
        trainer.header_extra = {k: ckpt.header[k] for k in ("stage1_frozen_hash", "stage1_step") if k in ckpt.header}
        return trainer


def train_stage1(
    manifest: DatasetManifest | str | Path,
    config: RunConfig,
    ckpt_out: str | Path | None = None,
    *,
    resume: str | Path | None = None,
    log_path=None,
    checkpoint_every: int = 500,
):
    """Autoencoder (unless resuming) plus stage-1 diffusion training. Returns the trainer."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    clips = load_split(manifest, "train")
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.stage != 1:
            raise ValidationError(f"{resume} is a stage-{ckpt.stage} checkpoint; expected stage 1")
        model = ckpt.build_model()
        data = prepare_latents(model, clips)
        trainer = DiffusionTrainer.resume(ckpt, data, log_path, model)
        config = ckpt.config.updated(stage1_steps=config.stage1_steps)
        trainer.config = config
    else:
        config.validate()
        torch.manual_seed(config.seed)
        model = Colorizer(config)
        train_autoencoder(model, clips, config, log_path)
        data = prepare_latents(model, clips)
        trainer = DiffusionTrainer(model, data, 1, config, log_path=log_path)
    trainer.run(config.stage1_steps, ckpt_out, checkpoint_every)
    if ckpt_out is not None:
        trainer.save(ckpt_out)
    return trainer


def train_stage2(
    manifest: DatasetManifest | str | Path,
    stage1_ckpt: str | Path,
    config: RunConfig | None = None,
    ckpt_out: str | Path | None = None,
    *,
    resume: str | Path | None = None,
    log_path=None,
    checkpoint_every: int = 500,
):
    """Train only the pre-fusion stack on top of a frozen stage-1 model."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    clips = load_split(manifest, "train")
    base = load_checkpoint(stage1_ckpt)
    if base.stage != 1:
        raise ValidationError(f"{stage1_ckpt} is not a stage-1 checkpoint")
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model = ckpt.build_model()
        trainer = DiffusionTrainer.resume(ckpt, prepare_latents(model, clips), log_path, model)
    else:
        model = base.build_model()
        cfg = base.config
        if config is not None:
            cfg = cfg.updated(
                lr=config.lr, stage2_steps=config.stage2_steps, batch_size=config.batch_size,
                warmup_steps=config.warmup_steps, seed=config.seed,
            )
        model.config = cfg
        trainer = DiffusionTrainer(model, prepare_latents(model, clips), 2, cfg, log_path=log_path)
    trainer.header_extra = {"stage1_frozen_hash": base.header.get("frozen_hash"), "stage1_step": base.step}
    steps = (config or trainer.config).stage2_steps
    trainer.run(steps, ckpt_out, checkpoint_every)
    if ckpt_out is not None:
        trainer.save(ckpt_out)
    return trainer
