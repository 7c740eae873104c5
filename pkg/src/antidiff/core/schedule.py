"""Linear DDPM noise schedule and closed-form forward noising."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables, stored 0-based: ``betas[t - 1]`` belongs to timestep ``t``."""

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> torch.Tensor:
        """ᾱ at 1-based timestep(s) ``t``; ``t = 0`` maps to 1 (clean signal)."""
        t = torch.as_tensor(t, dtype=torch.long)
        padded = torch.cat([self.alpha_bars.new_ones(1), self.alpha_bars])
        return padded[t]


def build_schedule(T: int, beta_start: float, beta_end: float, dtype=torch.float64) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = [beta_start]
    else:
        betas = [beta_start + (beta_end - beta_start) * i / (T - 1) for i in range(T)]
    alphas = [1.0 - b for b in betas]
    alpha_bars = []
    running = 1.0
    for a in alphas:
        running *= a
        alpha_bars.append(running)
    return NoiseSchedule(
        betas=torch.tensor(betas, dtype=dtype),
        alphas=torch.tensor(alphas, dtype=dtype),
        alpha_bars=torch.tensor(alpha_bars, dtype=dtype),
    )


def add_noise(z: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``z_t = sqrt(ᾱ_t) z + sqrt(1 - ᾱ_t) eps``.

    ``t`` is an int or an integer tensor broadcasting against the leading
    dimension of ``z``.
    """
    if eps.shape != z.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z shape {tuple(z.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (int(t.min()) < 1 or int(t.max()) > sched.T):
        raise ValueError(f"timestep out of range 1..{sched.T}")
    ab = sched.alpha_bar(t).to(z.dtype)
    ab = ab.reshape(ab.shape + (1,) * (z.dim() - ab.dim()))
    return ab.sqrt() * z + (1.0 - ab).sqrt() * eps
