"""Denoising loss and the (t, eps) draws that estimate its expectation."""
from __future__ import annotations

from typing import NamedTuple

import torch

from .model import AttentionCapture, ToyLDM
from .schedule import add_noise


class Draws(NamedTuple):
    """``K`` Monte-Carlo draws for a batch of ``B`` images.

    ``t`` is [K, B] (1-based timesteps), ``eps`` is [K, B, C_z, h, w].
    """

    t: torch.Tensor
    eps: torch.Tensor

    def __len__(self) -> int:
        return self.t.shape[0]

    def to(self, dtype) -> "Draws":
        return Draws(self.t, self.eps.to(dtype))


def sample_draws(
    generator: torch.Generator,
    k: int,
    batch: int,
    latent_shape: tuple[int, ...],
    T: int,
    dtype=torch.float32,
) -> Draws:
    """Uniform timesteps over 1..T and standard-normal noise."""
    t = torch.randint(1, T + 1, (k, batch), generator=generator)
    eps = torch.randn((k, batch, *latent_shape), generator=generator, dtype=torch.float32).to(dtype)
    return Draws(t, eps)


def draws_for(model: ToyLDM, generator: torch.Generator, k: int, batch: int, dtype=None) -> Draws:
    dtype = dtype or next(model.parameters()).dtype
    return sample_draws(generator, k, batch, model.latent_shape, model.cfg.T, dtype)


def _check_draws(draws: Draws, batch: int) -> None:
    if len(draws) == 0:
        raise ValueError("draws must be nonempty")
    if draws.eps.shape[1] != batch:
        raise ValueError(f"draws cover {draws.eps.shape[1]} images, batch has {batch}")


def _expand_prompt(f: torch.Tensor, k: int, b: int) -> torch.Tensor:
    if f.dim() == 2:
        return f
    # per-image prompts [B, L, d] repeat across the K draws
    return f.unsqueeze(0).expand(k, *f.shape).reshape(k * b, *f.shape[1:])


def noisy_forward(
    model: ToyLDM,
    x: torch.Tensor,
    f: torch.Tensor,
    draws: Draws,
    capture: bool = False,
    layers: list[str] | None = None,
) -> tuple[torch.Tensor, torch.Tensor, AttentionCapture | None]:
    """Encode ``x`` [B, 3, H, W], noise it with every draw, predict the noise.

    Returns ``(eps, eps_hat, capture)`` with the draw and batch axes flattened
    to ``K * B``.
    """
    return noisy_forward_latent(model, model.encode(x), f, draws, capture, layers)


def noisy_forward_latent(
    model: ToyLDM,
    z: torch.Tensor,
    f: torch.Tensor,
    draws: Draws,
    capture: bool = False,
    layers: list[str] | None = None,
) -> tuple[torch.Tensor, torch.Tensor, AttentionCapture | None]:
    b = z.shape[0]
    _check_draws(draws, b)
    k = len(draws)
    z_t = add_noise(z.unsqueeze(0).expand(k, *z.shape), draws.t, draws.eps, model.schedule)
    eps_hat, cap = model.predict_noise(
        z_t.reshape(k * b, *z.shape[1:]),
        draws.t.reshape(-1),
        _expand_prompt(f, k, b),
        capture=capture,
        layers=layers,
    )
    return draws.eps.reshape(k * b, *z.shape[1:]), eps_hat, cap


def ldm_loss(model: ToyLDM, x: torch.Tensor, f: torch.Tensor, draws: Draws) -> torch.Tensor:
    """Mean over draws and elements of ``(eps - eps_theta(z_t, t, f))**2``."""
    eps, eps_hat, _ = noisy_forward(model, x, f, draws)
    return ((eps - eps_hat) ** 2).mean()


def ldm_loss_latent(model: ToyLDM, z: torch.Tensor, f: torch.Tensor, draws: Draws) -> torch.Tensor:
    """:func:`ldm_loss` on precomputed latents ``z = E(x)``."""
    eps, eps_hat, _ = noisy_forward_latent(model, z, f, draws)
    return ((eps - eps_hat) ** 2).mean()
