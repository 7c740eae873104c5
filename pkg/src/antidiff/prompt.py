"""Stage 1: fit the text embedding to the images with every model weight frozen."""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import NamedTuple

import torch

from .core.losses import draws_for, ldm_loss_latent
from .core.model import ToyLDM
from .data import PAD_ID
from .errors import check_finite
from .seeding import generator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PromptTuneConfig:
    steps: int = 50
    learning_rate: float = 10.0
    draws_per_step: int = 4
    seed: int = 0
    probe_draws: int = 16

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.draws_per_step < 1 or self.probe_draws < 1:
            raise ValueError("draw counts must be >= 1")


class PromptTuneResult(NamedTuple):
    embedding: torch.Tensor
    probe_before: float
    probe_after: float
    reverted: bool


@contextmanager
def frozen(model: torch.nn.Module):
    """Disable gradients for every parameter, restoring the flags on exit."""
    flags = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


def init_empty_embedding(model: ToyLDM, seq_len: int | None = None, d_embed: int | None = None) -> torch.Tensor:
    """Embedding of the empty prompt: every row is the pad token's vector."""
    seq_len = model.cfg.seq_len if seq_len is None else seq_len
    if seq_len < 1:
        raise ValueError("seq_len must be positive")
    if d_embed is not None and d_embed != model.cfg.d_embed:
        raise ValueError(f"model embeds into {model.cfg.d_embed} dims, not {d_embed}")
    with torch.no_grad():
        return model.embed([PAD_ID] * seq_len).clone()


def probe_loss(model: ToyLDM, z: torch.Tensor, f: torch.Tensor, draws) -> float:
    with torch.no_grad():
        return float(ldm_loss_latent(model, z, f, draws))


def tune_prompt(model: ToyLDM, x: torch.Tensor, f: torch.Tensor, cfg: PromptTuneConfig) -> PromptTuneResult:
    """Plain gradient descent on ``f`` against the denoising loss of ``x`` [B, 3, H, W].

    The probe loss (``cfg.probe_draws`` draws fixed by the seed) is measured
    before and after; an update that raises it is discarded and the input
    embedding is returned instead.
    """
    if x.shape[0] == 0:
        raise ValueError("empty image batch")
    f0 = f.detach().clone()
    with frozen(model), torch.no_grad():
        z = model.encode(x)
    probe = draws_for(model, generator(cfg.seed, "prompt-probe"), cfg.probe_draws, len(x), dtype=z.dtype)
    before = probe_loss(model, z, f0, probe)
    if cfg.steps == 0:
        return PromptTuneResult(f0, before, before, False)

    gen = generator(cfg.seed, "prompt-steps")
    var = f0.clone().requires_grad_(True)
    with frozen(model):
        for step in range(cfg.steps):
            draws = draws_for(model, gen, cfg.draws_per_step, len(x), dtype=z.dtype)
            loss = ldm_loss_latent(model, z, var, draws)
            check_finite(loss, "prompt-tuning loss", step=step)
            (grad,) = torch.autograd.grad(loss, var)
            with torch.no_grad():
                var -= cfg.learning_rate * grad
    tuned = var.detach()
    after = probe_loss(model, z, tuned, probe)
    if after > before:
        log.warning("prompt tuning raised the probe loss (%.5f -> %.5f); keeping input embedding", before, after)
        return PromptTuneResult(f0, before, before, True)
    return PromptTuneResult(tuned, before, after, False)
