"""Toy 4x-downsampling autoencoder and its luminance twin.

The luminance encoder mirrors the color encoder and exposes features at
downsample factors 1, 2 and 4. The decoder adds them back at the matching
resolutions through 1x1 skip projections, so structure comes from the
monochrome input while the latent carries chroma.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

SCALES = (1, 2, 4)


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None and temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    """(N, in_ch, H, W) -> (N, out_ch, H/4, W/4), plus per-scale features."""

    def __init__(self, in_ch: int, out_ch: int, widths=(32, 64, 64)):
        super().__init__()
        w1, w2, w4 = widths
        self.widths = tuple(widths)
        self.conv_in = nn.Conv2d(in_ch, w1, 3, padding=1)
        self.block1 = ResBlock(w1, w1)
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.block2 = ResBlock(w2, w2)
        self.down4 = nn.Conv2d(w2, w4, 3, stride=2, padding=1)
        self.block4 = ResBlock(w4, w4)
        self.norm_out = group_norm(w4)
        self.conv_out = nn.Conv2d(w4, out_ch, 3, padding=1)

    def forward(self, x):
        f1 = self.block1(self.conv_in(x))
        f2 = self.block2(self.down2(f1))
        f4 = self.block4(self.down4(f2))
        out = self.conv_out(F.silu(self.norm_out(f4)))
        return out, {1: f1, 2: f2, 4: f4}


class Decoder(nn.Module):
    def __init__(self, latent_ch: int, widths=(32, 64, 64), skip_widths=(32, 64, 64)):
        super().__init__()
        w1, w2, w4 = widths
        self.conv_in = nn.Conv2d(latent_ch, w4, 3, padding=1)
        self.skip4 = nn.Conv2d(skip_widths[2], w4, 1)
        self.block4 = ResBlock(w4, w4)
        self.up2 = nn.Conv2d(w4, w2, 3, padding=1)
        self.skip2 = nn.Conv2d(skip_widths[1], w2, 1)
        self.block2 = ResBlock(w2, w2)
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.skip1 = nn.Conv2d(skip_widths[0], w1, 1)
        self.block1 = ResBlock(w1, w1)
        self.norm_out = group_norm(w1)
        self.conv_out = nn.Conv2d(w1, 3, 3, padding=1)

    def forward(self, z, skips=None, skip_scale: float = 1.0):
        """Decode latents; ``skips`` maps downsample factor -> luminance features."""

        def inject(h, proj, feat):
            if feat is None or skip_scale == 0.0:
                return h
            return h + skip_scale * proj(feat)

        skips = skips or {}
        h = inject(self.conv_in(z), self.skip4, skips.get(4))
        h = self.block4(h)
        h = self.up2(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = self.block2(inject(h, self.skip2, skips.get(2)))
        h = self.up1(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = self.block1(inject(h, self.skip1, skips.get(1)))
        return torch.sigmoid(self.conv_out(F.silu(self.norm_out(h))))


class ColorAutoencoder(nn.Module):
    """Color encoder, luminance encoder and skip-connected decoder.

    Frame tensors are (N, C, H, W) with values in [0, 1]. ``latent_scale`` is
    set after training so that scaled latents have unit variance.
    """

    def __init__(self, latent_channels: int = 4, lum_channels: int = 32, widths=(32, 64, 64)):
        super().__init__()
        self.latent_channels = latent_channels
        self.lum_channels = lum_channels
        self.encoder = Encoder(3, latent_channels, widths)
        self.lum_encoder = Encoder(1, lum_channels, widths)
        self.decoder = Decoder(latent_channels, widths, widths)
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, frames):
        z, _ = self.encoder(frames)
        return z * self.latent_scale

    def encode_luminance(self, lum):
        """Returns the latent-resolution grid and the per-scale skip features."""
        return self.lum_encoder(lum)

    def decode(self, z, skips=None, skip_scale: float = 1.0):
        return self.decoder(z / self.latent_scale, skips, skip_scale)

    def reconstruct(self, frames, lum, skip_scale: float = 1.0):
        _, skips = self.encode_luminance(lum)
        z, _ = self.encoder(frames)
        return self.decoder(z, skips, skip_scale)
