"""Deterministic DDIM colorization of monochrome clips and long videos."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..ccf import FusionOperator, build_fusion_plan, ccf_denoise_pass, enumerate_intervals
from ..errors import ValidationError
from ..synthvid import to_luminance
from .model import Colorizer
from .schedule import ddim_step


def _luminance_tensor(mono: np.ndarray) -> torch.Tensor:
    mono = np.asarray(mono, dtype=np.float64)
    if mono.ndim == 4 and mono.shape[-1] == 3:
        mono = to_luminance(mono)
    if mono.ndim == 3:
        mono = mono[..., None]
    if mono.ndim != 4 or mono.shape[-1] != 1:
        raise ValidationError(f"expected (N, H, W[, 1|3]) frames, got {mono.shape}")
    return torch.from_numpy(mono).float().permute(0, 3, 1, 2).unsqueeze(0)  # (1, N, 1, H, W)


@torch.no_grad()
def colorize(
    model: Colorizer,
    mono: np.ndarray,
    caption: str,
    *,
    seed: int = 0,
    steps: int | None = None,
    intervals=None,
    use_tda: bool | None = None,
    plan_path: str | Path | None = None,
    return_latents: bool = False,
):
    """Colorize ``mono`` frames (N, H, W[, 1]) guided by ``caption``.

    Videos longer than the training clip length go through cross-clip fusion;
    ``intervals=[1]`` reduces that to independent back-to-back clips.
    Returns RGB frames (N, H, W, 3) in [0, 1].
    """
    if not caption or not caption.strip():
        raise ValidationError("caption is empty")
    model.eval()
    previous = [s.tda.enabled for s in model.denoiser.stages]
    if use_tda is not None:
        model.denoiser.set_tda_enabled(use_tda)
    try:
        lum = _luminance_tensor(mono)
        n = lum.shape[1]
        y_grid, skips = model.luminance_features(lum)
        gen = torch.Generator().manual_seed(int(seed))
        c, (h, w) = model.config.latent_channels, y_grid.shape[-2:]
        z = torch.randn((n, c, h, w), generator=gen)
        nf = model.config.clip_length
        timesteps = model.schedule.sampling_timesteps(steps or model.config.sampler_steps)

        if n <= nf and intervals is None:
            context, pad = model.text_condition([caption], y_grid)
            for i, t in enumerate(timesteps):
                t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else None
                eps = model.predict_noise(z[None], torch.tensor([t]), context, pad, y_grid)[0]
                z = ddim_step(z, eps, t, t_prev, model.schedule)
        else:
            if intervals is None:
                intervals = enumerate_intervals(n)
            plan = build_fusion_plan(n, nf, intervals)
            if plan_path is not None:
                plan.dump(plan_path)
            op = FusionOperator(plan)
            clip_y = op.scatter(y_grid[0])
            context, pad = model.text_condition([caption], clip_y)
            for i, t in enumerate(timesteps):
                t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else None
                eps = ccf_denoise_pass(z, model.denoiser, plan, t, context, pad, y_grid[0], op)
                z = ddim_step(z, eps, t, t_prev, model.schedule)

        frames = model.decode(z, skips).clamp(0.0, 1.0)
    finally:
        for stage, enabled in zip(model.denoiser.stages, previous):
            stage.tda.enabled = enabled
    out = frames.permute(0, 2, 3, 1).double().numpy()
    return (out, z) if return_latents else out
