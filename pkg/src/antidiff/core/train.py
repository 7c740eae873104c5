"""Pretraining of the toy LDM: autoencoder first, then UNet and embedder on frozen latents."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..data import ToyDataset, augment_caption, tokenize
from ..errors import check_finite
from .losses import draws_for, ldm_loss
from .model import ModelConfig, ToyLDM

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    seed: int = 0
    ae_steps: int = 1500
    ldm_steps: int = 12000
    batch_size: int = 32
    ae_lr: float = 2e-3
    ldm_lr: float = 1e-3
    # probability of omitting each caption attribute (the shape falls back to "object")
    attribute_dropout: float = 0.3
    eval_draws: int = 8
    model: ModelConfig = field(default_factory=ModelConfig)


def _batches(n: int, batch_size: int, steps: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = torch.randperm(n, generator=gen)
            pos = 0
        yield order[pos : pos + batch_size]
        pos += batch_size


def reconstruction_mse(model: ToyLDM, images: torch.Tensor) -> float:
    with torch.no_grad():
        return float(((model.decode(model.encode(images)) - images) ** 2).mean())


def heldout_ldm_loss(model: ToyLDM, data: ToyDataset, n_draws: int, seed: int) -> float:
    """Held-out denoising loss on draws fixed by ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.as_tensor(data.images)
    with torch.no_grad():
        f = model.embed(data.tokens)
        draws = draws_for(model, gen, n_draws, len(x))
        return float(ldm_loss(model, x, f, draws))


def pretrain_toy(train: ToyDataset, cfg: PretrainConfig, heldout: ToyDataset | None = None):
    """Train a fresh :class:`ToyLDM`; returns ``(model, stats)``.

    With zero steps the returned model equals its seeded initialization.
    ``stats`` holds reconstruction MSE and held-out denoising loss before and
    after the diffusion phase when ``heldout`` is given.
    """
    model = ToyLDM(cfg.model, seed=cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    images = torch.as_tensor(train.images)
    stats: dict = {}

    opt = torch.optim.Adam(list(model.encoder.parameters()) + list(model.decoder.parameters()), lr=cfg.ae_lr)
    for step, idx in enumerate(_batches(len(images), cfg.batch_size, cfg.ae_steps, gen)):
        x = images[idx]
        loss = ((model.decode(model.encode(x), clamp=False) - x) ** 2).mean()
        check_finite(loss, "autoencoder loss", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 500 == 0:
            log.info("ae step %d loss %.5f", step, loss.item())

    if cfg.ae_steps > 0:
        with torch.no_grad():
            raw = model.encoder.net(2.0 * images - 1.0)
            model.encoder.latent_scale.fill_(1.0 / float(raw.std()))
    stats["recon_mse_train"] = reconstruction_mse(model, images)
    if heldout is not None:
        stats["recon_mse_heldout"] = reconstruction_mse(model, torch.as_tensor(heldout.images))
        stats["ldm_loss_heldout_initial"] = heldout_ldm_loss(model, heldout, cfg.eval_draws, cfg.seed + 1)

    for p in list(model.encoder.parameters()) + list(model.decoder.parameters()):
        p.requires_grad_(False)
    opt = torch.optim.Adam(list(model.unet.parameters()) + list(model.embedder.parameters()), lr=cfg.ldm_lr)
    rng = np.random.default_rng(cfg.seed)
    for step, idx in enumerate(_batches(len(images), cfg.batch_size, cfg.ldm_steps, gen)):
        x = images[idx]
        tok = torch.as_tensor(
            [tokenize(augment_caption(train.identities[i], rng, cfg.attribute_dropout)) for i in idx.tolist()]
        )
        draws = draws_for(model, gen, 1, len(idx))
        loss = ldm_loss(model, x, model.embed(tok), draws)
        check_finite(loss, "denoising loss", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 500 == 0:
            log.info("ldm step %d loss %.5f", step, loss.item())
    for p in model.parameters():
        p.requires_grad_(True)

    if heldout is not None:
        stats["ldm_loss_heldout_final"] = heldout_ldm_loss(model, heldout, cfg.eval_draws, cfg.seed + 1)
    return model, stats
