"""Video denoising U-Net with temporal deformable attention.

Tensors inside the network are (B, F, C, h, w). Every stage applies, in
order, a residual block, per-frame spatial self-attention, temporal
deformable attention and cross-attention to the caption embeddings.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError
from ..layers import MultiHeadAttention, sinusoidal_embedding
from ..tda import TemporalDeformableAttention
from .autoencoder import ResBlock, group_norm

STAGE_ORDER = ("res", "spatial_attn", "tda", "cross_attn")


def _frames_to_tokens(x):
    bf, c, h, w = x.shape
    return x.flatten(2).transpose(1, 2)


def _tokens_to_frames(x, h, w):
    bf, n, c = x.shape
    return x.transpose(1, 2).reshape(bf, c, h, w)


class SpatialSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads=heads)

    def forward(self, x, n_frames, **_):
        bf, c, h, w = x.shape
        tokens = _frames_to_tokens(x)
        tokens = tokens + self.attn(self.norm(tokens))
        return _tokens_to_frames(tokens, h, w)


class TDABlock(nn.Module):
    """Residual temporal deformable attention; ``enabled=False`` makes it the identity."""

    def __init__(self, dim: int, heads: int, alpha: float, rate_spatial: int, rate_temporal: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.tda = TemporalDeformableAttention(dim, heads, alpha, rate_spatial, rate_temporal)
        self.enabled = True

    def forward(self, x, n_frames, hook=None, **_):
        bf, c, h, w = x.shape
        if self.enabled:
            grid = x.reshape(bf // n_frames, n_frames, c, h, w).permute(0, 1, 3, 4, 2)
            grid = grid + self.tda(self.norm(grid))
            x = grid.permute(0, 1, 4, 2, 3).reshape(bf, c, h, w)
        if hook is not None:
            x = hook(x.reshape(bf // n_frames, n_frames, c, h, w)).reshape(bf, c, h, w)
        return x


class CrossAttention(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, context_dim, heads)

    def forward(self, x, n_frames, context=None, context_mask=None, **_):
        bf, c, h, w = x.shape
        ctx = context.repeat_interleave(n_frames, dim=0)
        mask = context_mask.repeat_interleave(n_frames, dim=0) if context_mask is not None else None
        tokens = _frames_to_tokens(x)
        tokens = tokens + self.attn(self.norm(tokens), ctx, key_padding_mask=mask)
        return _tokens_to_frames(tokens, h, w)


class Stage(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim, context_dim, heads, alpha, rate_spatial, rate_temporal, name):
        super().__init__()
        self.name = name
        self.res = ResBlock(in_ch, out_ch, temb_dim)
        self.spatial_attn = SpatialSelfAttention(out_ch, heads)
        self.tda = TDABlock(out_ch, heads, alpha, rate_spatial, rate_temporal)
        self.cross_attn = CrossAttention(out_ch, context_dim, heads)

    @property
    def block_order(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.named_children())

    def forward(self, x, temb, n_frames, context, context_mask, hook=None):
        x = self.res(x, temb)
        x = self.spatial_attn(x, n_frames)
        x = self.tda(x, n_frames, hook=hook)
        return self.cross_attn(x, n_frames, context=context, context_mask=context_mask)


class Denoiser(nn.Module):
    """Predicts the noise added to a latent clip.

    Args:
        latent_channels: channels of the latent code.
        lum_channels: channels of the luminance grid injected at the input.
        context_dim: width of the caption embeddings.
        widths: channel widths of the two resolution levels.
    """

    def __init__(
        self,
        latent_channels: int = 4,
        lum_channels: int = 32,
        context_dim: int = 64,
        widths=(64, 128),
        heads: int = 4,
        alpha: float = 4.0,
        rate_spatial: int = 2,
        rate_temporal: int = 2,
        temb_dim: int = 128,
    ):
        super().__init__()
        w0, w1 = widths
        self.latent_channels = latent_channels
        self.lum_channels = lum_channels
        self.temb_base = w0
        self.time_mlp = nn.Sequential(nn.Linear(w0, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(latent_channels, w0, 3, padding=1)
        self.lum_in = nn.Conv2d(lum_channels, w0, 1)
        kw = dict(temb_dim=temb_dim, context_dim=context_dim, heads=heads, alpha=alpha,
                  rate_spatial=rate_spatial, rate_temporal=rate_temporal)
        self.down = Stage(w0, w0, name="down", **kw)
        self.downsample = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.mid = Stage(w1, w1, name="mid", **kw)
        self.upsample = nn.Conv2d(w1, w0, 3, padding=1)
        self.up = Stage(2 * w0, w0, name="up", **kw)
        self.norm_out = group_norm(w0)
        self.conv_out = nn.Conv2d(w0, latent_channels, 3, padding=1)

    @property
    def stages(self) -> list[Stage]:
        return [self.down, self.mid, self.up]

    def set_tda_enabled(self, enabled: bool) -> None:
        for stage in self.stages:
            stage.tda.enabled = enabled

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        context: torch.Tensor,
        y_lum: torch.Tensor,
        context_mask: torch.Tensor | None = None,
        tda_hook: Callable[[torch.Tensor], torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """z: (B, F, C, h, w); t: (B,); context: (B, N, D); y_lum: (B, F, C_lum, h, w)."""
        if z.dim() != 5 or z.shape[2] != self.latent_channels:
            raise ValidationError(f"stage input: expected (B, F, {self.latent_channels}, h, w), got {tuple(z.shape)}")
        b, nf, c, h, w = z.shape
        if y_lum.shape[:2] != (b, nf) or y_lum.shape[2] != self.lum_channels or y_lum.shape[3:] != (h, w):
            raise ValidationError(f"stage input: luminance grid {tuple(y_lum.shape)} does not match latent {tuple(z.shape)}")
        if context.shape[0] != b:
            raise ValidationError("stage cross_attn: caption batch does not match latent batch")
        if h % 2 or w % 2:
            raise ValidationError("stage downsample: latent height and width must be even")

        t = torch.as_tensor(t).reshape(-1).expand(b)
        temb = self.time_mlp(sinusoidal_embedding(t, self.temb_base).to(z.dtype))
        temb = temb.repeat_interleave(nf, dim=0)

        x = self.conv_in(z.reshape(b * nf, c, h, w)) + self.lum_in(y_lum.reshape(b * nf, -1, h, w))
        skip = self.down(x, temb, nf, context, context_mask, tda_hook)
        x = self.mid(self.downsample(skip), temb, nf, context, context_mask, tda_hook)
        x = self.upsample(F.interpolate(x, scale_factor=2.0, mode="nearest"))
        x = self.up(torch.cat([x, skip], dim=1), temb, nf, context, context_mask, tda_hook)
        out = self.conv_out(F.silu(self.norm_out(x)))
        return out.reshape(b, nf, c, h, w)
