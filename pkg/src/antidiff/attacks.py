"""Simulated misuse of the victim model.

* :func:`finetune_attack` – DreamBooth-style personalization: the UNet and one
  subject-token row learn the images under an instance prompt.
* :func:`edit_attack` – noise the image's latent part-way, then denoise it
  under a target prompt.
* :func:`ddim_sample` – deterministic DDIM sampling to render what a model produces.
"""
from __future__ import annotations

import copy
from typing import Callable

import torch

from .core.losses import draws_for, ldm_loss_latent
from .core.model import ToyLDM
from .core.schedule import NoiseSchedule, add_noise
from .data import VOCAB, subject_caption, tokenize
from .errors import check_finite
from .prompt import frozen
from .seeding import generator

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


def finetune_attack(
    base: ToyLDM,
    images: torch.Tensor,
    subject_token: int = VOCAB["sks0"],
    steps: int = 100,
    lr: float = 5e-5,
    seed: int = 0,
    draws_per_step: int = 4,
    prompt: list[int] | None = None,
) -> ToyLDM:
    """Personalize a copy of ``base`` on ``images`` with Adam.

    ``prompt`` defaults to ``a photo of <subject> object``. Only the UNet and
    the subject token's table row change.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    model = copy.deepcopy(base)
    if steps == 0:
        return model
    tokens = torch.as_tensor(prompt if prompt is not None else tokenize(subject_caption(_word(subject_token))))
    slots = (tokens == subject_token).nonzero().flatten()
    if len(slots) == 0:
        raise ValueError("prompt does not contain the subject token")
    with torch.no_grad():
        z = model.encode(images)
        context = model.embed(tokens)
        row = model.embedder.table.weight[subject_token].clone()
    row.requires_grad_(True)
    params = list(model.unet.parameters())
    gen = generator(seed, "finetune")
    with frozen(model):
        for p in params:
            p.requires_grad_(True)
        opt = torch.optim.Adam(params + [row], lr=lr)
        for step in range(steps):
            f = context.clone()
            f[slots] = row + model.embedder.position[slots]
            draws = draws_for(model, gen, draws_per_step, len(z), dtype=z.dtype)
            loss = ldm_loss_latent(model, z, f, draws)
            check_finite(loss, "fine-tune loss", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        model.embedder.table.weight[subject_token] = row.detach()
    return model


def _word(token_id: int) -> str:
    for word, idx in VOCAB.items():
        if idx == token_id:
            return word
    raise ValueError(f"token id {token_id} outside the vocabulary")


def strided_timesteps(t_start: int, T: int, n_steps: int) -> list[int]:
    """Descending timesteps from ``t_start`` with stride ``T // n_steps``."""
    if n_steps < 1 or T % n_steps:
        raise ValueError(f"n_steps={n_steps} must divide T={T}")
    return list(range(t_start, 0, -(T // n_steps)))


def ddim_loop(eps_fn: EpsFn, z: torch.Tensor, sched: NoiseSchedule, timesteps: list[int], trajectory: list | None = None):
    """Deterministic DDIM from ``z`` at ``timesteps[0]`` down to the clean latent.

    Each step goes to the next listed timestep, the last one to t = 0.
    ``trajectory`` (when given) collects ``(t, z_t)`` including the endpoint.
    """
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        if trajectory is not None:
            trajectory.append((t, z))
        eps = eps_fn(z, t)
        ab_t = sched.alpha_bar(t).to(z.dtype)
        ab_prev = sched.alpha_bar(t_prev).to(z.dtype)
        z0 = (z - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()
        z = ab_prev.sqrt() * z0 + (1 - ab_prev).sqrt() * eps
    if trajectory is not None:
        trajectory.append((0, z))
    return z


def _eps_fn(model: ToyLDM, f: torch.Tensor) -> EpsFn:
    def fn(z, t):
        return model.predict_noise(z, t, f)[0]

    return fn


def ddim_sample(
    model: ToyLDM,
    f: torch.Tensor,
    n_steps: int = 20,
    seed: int = 0,
    n: int = 1,
    return_latent: bool = False,
) -> torch.Tensor:
    """``n`` images [n, 3, H, W] from seeded Gaussian latents."""
    gen = generator(seed, "ddim")
    dtype = next(model.parameters()).dtype
    z = torch.randn((n, *model.latent_shape), generator=gen, dtype=torch.float32).to(dtype)
    ts = strided_timesteps(model.cfg.T, model.cfg.T, n_steps)
    with torch.no_grad():
        z0 = ddim_loop(_eps_fn(model, f), z, model.schedule, ts)
        return z0 if return_latent else model.decode(z0)


def edit_attack(
    model: ToyLDM,
    x: torch.Tensor,
    f_target: torch.Tensor,
    t_edit_frac: float = 0.6,
    seed: int = 0,
    n_steps: int = 20,
) -> torch.Tensor:
    """Encode, noise to ``round(t_edit_frac * T)``, DDIM-denoise under ``f_target``, decode."""
    if not 0.0 <= t_edit_frac <= 1.0:
        raise ValueError("t_edit_frac must lie in [0, 1]")
    T = model.cfg.T
    t = int(round(t_edit_frac * T))
    with torch.no_grad():
        z = model.encode(x)
        if t == 0:
            return model.decode(z)
        gen = generator(seed, "edit")
        eps = torch.randn(z.shape, generator=gen, dtype=torch.float32).to(z.dtype)
        z_t = add_noise(z, t, eps, model.schedule)
        z0 = ddim_loop(_eps_fn(model, f_target), z_t, model.schedule, strided_timesteps(t, T, n_steps))
        return model.decode(z0)
