from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import ValidationError


@dataclass
class NoiseSchedule:
    """Linear-beta DDPM schedule with epsilon parameterization."""

    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValidationError("need 0 < beta_start < beta_end < 1")
        self.betas = torch.linspace(self.beta_start, self.beta_end, self.num_steps, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    def alpha_bar(self, t) -> torch.Tensor:
        return self.alpha_bars[torch.as_tensor(t, dtype=torch.long)]

    def sampling_timesteps(self, steps: int) -> list[int]:
        """Descending timesteps for a ``steps``-step DDIM pass."""
        steps = max(1, min(steps, self.num_steps))
        ts = torch.linspace(self.num_steps - 1, 0, steps).round().long().tolist()
        return list(dict.fromkeys(ts))


def add_noise(z0: torch.Tensor, t, schedule: NoiseSchedule, generator: torch.Generator | None = None, noise=None):
    """Forward diffusion: returns (z_t, eps). ``t`` is a scalar or one step per batch item."""
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 0).any() or (t >= schedule.num_steps).any():
        raise ValidationError(f"timestep outside [0, {schedule.num_steps})")
    if noise is None:
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    ab = schedule.alpha_bar(t).to(z0.dtype)
    ab = ab.reshape(ab.shape + (1,) * (z0.dim() - ab.dim()))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise, noise


def ddim_step(z_t, eps, t: int, t_prev: int | None, schedule: NoiseSchedule):
    """Deterministic (eta = 0) update from ``t`` to ``t_prev`` (None means the clean end)."""
    ab = schedule.alpha_bar(t).to(z_t.dtype)
    ab_prev = schedule.alpha_bar(t_prev).to(z_t.dtype) if t_prev is not None else torch.ones((), dtype=z_t.dtype)
    z0_pred = (z_t - (1.0 - ab).sqrt() * eps) / ab.sqrt()
    return ab_prev.sqrt() * z0_pred + (1.0 - ab_prev).sqrt() * eps
