"""The assembled colorizer: autoencoder, text embedder, denoiser and pre-fusion."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn

from ..cmpf import CrossModalityPreFusion, TextEmbedder, Vocab
from ..config import RunConfig
from ..lexicon import load_lexicon
from .autoencoder import ColorAutoencoder
from .denoiser import Denoiser
from .schedule import NoiseSchedule

FROZEN_IN_STAGE2 = ("ae", "text", "denoiser")


class Colorizer(nn.Module):
    def __init__(self, config: RunConfig, vocab: Vocab | None = None):
        super().__init__()
        self.config = config
        self.vocab = vocab or Vocab(load_lexicon(config.lexicon))
        self.ae = ColorAutoencoder(config.latent_channels, config.lum_channels, config.ae_widths)
        self.text = TextEmbedder(self.vocab, config.text_dim)
        self.denoiser = Denoiser(
            config.latent_channels,
            config.lum_channels,
            config.text_dim,
            config.unet_widths,
            config.heads,
            config.alpha,
            config.rate_spatial,
            config.rate_temporal,
        )
        self.denoiser.set_tda_enabled(config.use_tda)
        self.cmpf = CrossModalityPreFusion(
            config.text_dim,
            config.lum_channels,
            config.cmpf_blocks,
            config.heads,
            config.heads,
            config.alpha,
            config.rate_spatial,
            config.rate_temporal,
        )
        self.schedule = NoiseSchedule(config.diffusion_steps, config.beta_start, config.beta_end)

    @torch.no_grad()
    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, F, 3, H, W) -> scaled latents (B, F, C, h, w)."""
        b, f = frames.shape[:2]
        z = self.ae.encode(frames.flatten(0, 1))
        return z.reshape((b, f) + z.shape[1:])

    def luminance_features(self, lum: torch.Tensor):
        """(B, F, 1, H, W) -> latent-resolution grid (B, F, C_lum, h, w) and decoder skips."""
        b, f = lum.shape[:2]
        grid, skips = self.ae.encode_luminance(lum.flatten(0, 1))
        return grid.reshape((b, f) + grid.shape[1:]), skips

    def text_condition(self, captions, y_lum: torch.Tensor | None = None, use_cmpf: bool = True):
        """Caption embeddings (B, N, D) and padding mask; refined by CMPF when ``use_cmpf``."""
        tokens = self.text(captions)
        if tokens.embeddings.shape[0] == 1 and y_lum is not None and y_lum.shape[0] > 1:
            tokens = type(tokens)(*(x.expand(y_lum.shape[0], *x.shape[1:]) for x in
                                    (tokens.token_ids, tokens.embeddings, tokens.color_mask, tokens.pad_mask)))
        if not use_cmpf:
            return tokens.embeddings, tokens.pad_mask
        grid = y_lum.permute(0, 1, 3, 4, 2)  # channels-last for the deformable sampler
        return self.cmpf(tokens, grid), tokens.pad_mask

    def predict_noise(self, z_t, t, context, pad_mask, y_lum, tda_hook=None):
        return self.denoiser(z_t, t, context, y_lum, pad_mask, tda_hook)

    def decode(self, z: torch.Tensor, skips, skip_scale: float = 1.0) -> torch.Tensor:
        """(N, C, h, w) latents -> (N, 3, H, W) frames."""
        return self.ae.decode(z, skips, skip_scale)


def parameter_hash(module: nn.Module, prefixes=FROZEN_IN_STAGE2) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        if name.split(".")[0] in prefixes:
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()
