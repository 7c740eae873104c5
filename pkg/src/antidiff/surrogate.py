"""Stage 3: fine-tune the surrogate UNet on the adversarial images, as a misuser would."""
from __future__ import annotations

import copy
import logging
from typing import NamedTuple

import torch

from .core.losses import draws_for, ldm_loss_latent
from .core.model import ToyLDM
from .errors import check_finite
from .prompt import frozen, probe_loss
from .seeding import generator

log = logging.getLogger(__name__)


class SurrogateResult(NamedTuple):
    model: ToyLDM
    probe_before: float
    probe_after: float
    reverted: bool


def unet_update(
    model: ToyLDM,
    x_hat: torch.Tensor,
    f: torch.Tensor,
    steps: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    draws_per_step: int = 4,
    probe_draws: int = 16,
) -> SurrogateResult:
    """Gradient descent on the UNet only; returns an updated copy of ``model``.

    Every parameter outside the ``unet`` group keeps its exact bytes. An update
    that raises the probe loss is discarded.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if x_hat.shape[0] == 0:
        raise ValueError("empty image batch")
    out = copy.deepcopy(model)
    f = f.detach()
    with frozen(out), torch.no_grad():
        z = out.encode(x_hat)
    probe = draws_for(out, generator(seed, "unet-probe"), probe_draws, len(z), dtype=z.dtype)
    before = probe_loss(out, z, f, probe)
    if steps == 0:
        return SurrogateResult(out, before, before, False)

    gen = generator(seed, "unet-steps")
    params = list(out.unet.parameters())
    with frozen(out):
        for p in params:
            p.requires_grad_(True)
        for step in range(steps):
            draws = draws_for(out, gen, draws_per_step, len(z), dtype=z.dtype)
            loss = ldm_loss_latent(out, z, f, draws)
            check_finite(loss, "surrogate loss", step=step)
            grads = torch.autograd.grad(loss, params)
            with torch.no_grad():
                for p, g in zip(params, grads):
                    p -= lr * g
    after = probe_loss(out, z, f, probe)
    if after > before:
        log.warning("surrogate update raised the probe loss (%.5f -> %.5f); keeping input UNet", before, after)
        return SurrogateResult(copy.deepcopy(model), before, before, True)
    return SurrogateResult(out, before, after, False)
