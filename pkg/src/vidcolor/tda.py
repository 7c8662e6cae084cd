"""Temporal deformable attention.

Keys and values come from a compressed spatiotemporal grid of reference
points, each displaced by a learned offset and read out of the feature video
by trilinear interpolation. Every position of the input video queries that
compact context, so the output keeps the input shape.

Feature grids are channels-last: ``(B, F, H, W, C)`` (a leading batch axis is
optional for the module-level helpers). Point coordinates are ``(x, y, t)`` in
continuous index units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericalError, ValidationError


@dataclass
class ReferenceGrid:
    points: torch.Tensor  # (H', W', F', 3) as (x, y, t)
    rate_spatial: int
    rate_temporal: int

    @property
    def resolution(self) -> tuple[int, int, int]:
        """(H', W', F')"""
        return tuple(self.points.shape[:3])

    @property
    def num_points(self) -> int:
        h, w, f = self.resolution
        return h * w * f


def _axis_centers(size: int, rate: int, dtype) -> torch.Tensor:
    n = size // rate
    coords = (torch.arange(n, dtype=dtype) + 0.5) * rate - 0.5
    return coords.clamp(0.0, size - 1)


def sample_reference_grid(
    n_frames: int,
    height: int,
    width: int,
    rate_spatial: int,
    rate_temporal: int,
    dtype=torch.float32,
) -> ReferenceGrid:
    """Uniform cell-center reference points, one per ``rate``-sized cell."""
    if not 1 <= rate_spatial <= min(height, width):
        raise ValidationError(f"spatial rate {rate_spatial} must be in [1, {min(height, width)}]")
    if not 1 <= rate_temporal <= n_frames:
        raise ValidationError(f"temporal rate {rate_temporal} must be in [1, {n_frames}]")
    xs = _axis_centers(width, rate_spatial, dtype)
    ys = _axis_centers(height, rate_spatial, dtype)
    ts = _axis_centers(n_frames, rate_temporal, dtype)
    gy, gx, gt = torch.meshgrid(ys, xs, ts, indexing="ij")
    return ReferenceGrid(torch.stack([gx, gy, gt], dim=-1), rate_spatial, rate_temporal)


def trilinear_gather(h: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Interpolate ``h`` at continuous points with the tent kernel max(0, 1 - |a - b|).

    h: (B, F, H, W, C) or (F, H, W, C); points: (B, M, 3) or (M, 3).
    Lattice corners outside the grid contribute nothing. Returns (B, M, C).
    """
    unbatched = h.dim() == 4
    if unbatched:
        h = h.unsqueeze(0)
    if points.dim() == 2:
        points = points.unsqueeze(0).expand(h.shape[0], -1, -1)
    b, nf, nh, nw, c = h.shape
    flat = h.reshape(b, nf * nh * nw, c)

    base = torch.floor(points).detach()
    frac = points - base
    base = base.long()
    out = flat.new_zeros(b, points.shape[1], c)
    for dt in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                ix = base[..., 0] + dx
                iy = base[..., 1] + dy
                it = base[..., 2] + dt
                weight = (
                    (frac[..., 0] if dx else 1.0 - frac[..., 0])
                    * (frac[..., 1] if dy else 1.0 - frac[..., 1])
                    * (frac[..., 2] if dt else 1.0 - frac[..., 2])
                )
                valid = (ix >= 0) & (ix < nw) & (iy >= 0) & (iy < nh) & (it >= 0) & (it < nf)
                index = (it.clamp(0, nf - 1) * nh + iy.clamp(0, nh - 1)) * nw + ix.clamp(0, nw - 1)
                corner = torch.gather(flat, 1, index.unsqueeze(-1).expand(-1, -1, c))
                out = out + (weight * valid).unsqueeze(-1) * corner
    return out[0] if unbatched else out


def clamp_points(points: torch.Tensor, n_frames: int, height: int, width: int) -> torch.Tensor:
    upper = points.new_tensor([width - 1, height - 1, n_frames - 1])
    return torch.minimum(points.clamp(min=0.0), upper)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, key_padding_mask=None) -> torch.Tensor:
    """Scaled dot-product attention over (B, heads, N, d) tensors.

    ``key_padding_mask`` is (B, M) with True marking keys to ignore.
    """
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_padding_mask is not None:
        logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


class TemporalDeformableAttention(nn.Module):
    """Deformable multi-head attention over a feature video.

    Args:
        dim: channel width C of the features.
        heads: number of attention heads; ``dim`` must divide evenly.
        alpha: offset range in index units (deformed = p + alpha * offset).
        rate_spatial, rate_temporal: reference-point sampling rates.
        offset_kernel: kernel size of both offset-network convolutions.
        offset_hidden: hidden width of the offset network (default C // 2).
    """

    def __init__(
        self,
        dim: int,
        heads: int = 4,
        alpha: float = 4.0,
        rate_spatial: int = 2,
        rate_temporal: int = 2,
        offset_kernel: int = 3,
        offset_hidden: int | None = None,
    ):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"channel width {dim} is not divisible by {heads} heads")
        if alpha < 0:
            raise ValidationError("alpha must be non-negative")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.alpha = alpha
        self.rate_spatial = rate_spatial
        self.rate_temporal = rate_temporal
        hidden = offset_hidden or max(dim // 2, 1)
        pad = offset_kernel // 2

        self.w_o = nn.Linear(dim, dim, bias=False)
        self.offset_conv1 = nn.Conv3d(
            dim, hidden, offset_kernel, stride=(rate_temporal, rate_spatial, rate_spatial), padding=pad
        )
        self.offset_conv2 = nn.Conv3d(hidden, 3, offset_kernel, padding=pad)
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_h = nn.Linear(dim, dim, bias=False)
        # start from undeformed reference points
        nn.init.zeros_(self.offset_conv2.weight)
        nn.init.zeros_(self.offset_conv2.bias)
        self._grid_cache: dict = {}

    def effective_rates(self, n_frames: int, height: int, width: int) -> tuple[int, int]:
        """(spatial, temporal) rates, capped so a small grid keeps one reference point."""
        return min(self.rate_spatial, height, width), min(self.rate_temporal, n_frames)

    def reference_grid(self, n_frames: int, height: int, width: int, dtype) -> ReferenceGrid:
        key = (n_frames, height, width, dtype)
        if key not in self._grid_cache:
            rs, rt = self.effective_rates(n_frames, height, width)
            self._grid_cache[key] = sample_reference_grid(n_frames, height, width, rs, rt, dtype)
        return self._grid_cache[key]

    def estimate_offsets(self, h: torch.Tensor) -> torch.Tensor:
        """Offsets in (-1, 1) shaped (B, H', W', F', 3)."""
        b, nf, nh, nw, _ = h.shape
        x = self.w_o(h).permute(0, 4, 1, 2, 3)  # (B, C, F, H, W)
        x = self.offset_conv1(x)
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite activations in offset_conv1")
        x = self.offset_conv2(F.gelu(x))
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite activations in offset_conv2")
        rs, rt = self.effective_rates(nf, nh, nw)
        ft, ht, wt = nf // rt, nh // rs, nw // rs
        x = x[:, :, :ft, :ht, :wt]
        # tanh rounds to +-1 in finite precision; keep the open interval
        bound = 1.0 - torch.finfo(x.dtype).eps / 2
        return torch.tanh(x).clamp(-bound, bound).permute(0, 3, 4, 2, 1)

    def deformed_points(self, h: torch.Tensor) -> torch.Tensor:
        b, nf, nh, nw, _ = h.shape
        grid = self.reference_grid(nf, nh, nw, h.dtype).points.to(h.device)
        points = grid.unsqueeze(0)
        if self.alpha != 0:
            points = points + self.alpha * self.estimate_offsets(h)
        else:
            points = points.expand(b, -1, -1, -1, -1)
        return clamp_points(points, nf, nh, nw).reshape(b, -1, 3)

    def context(self, h: torch.Tensor) -> torch.Tensor:
        """Context tokens gathered at the deformed points: (B, H'W'F', C)."""
        return trilinear_gather(h, self.deformed_points(h))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        unbatched = h.dim() == 4
        if unbatched:
            h = h.unsqueeze(0)
        if h.shape[-1] != self.dim:
            raise ValidationError(f"expected {self.dim} channels, got {h.shape[-1]}")
        b, nf, nh, nw, c = h.shape
        ctx = self.context(h)
        q = self.w_q(h).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        k = self.w_k(ctx).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.w_v(ctx).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        out = attend(q, k, v).transpose(1, 2).reshape(b, nf, nh, nw, c)
        out = self.w_h(out)
        return out[0] if unbatched else out


def estimate_offsets(h: torch.Tensor, params: TemporalDeformableAttention) -> torch.Tensor:
    if h.dim() == 4:
        return params.estimate_offsets(h.unsqueeze(0))[0]
    return params.estimate_offsets(h)


def tda_forward(h: torch.Tensor, params: TemporalDeformableAttention) -> torch.Tensor:
    return params(h)
