"""Imperceptibility, budget, attention and efficacy measurements."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .adversarial import sdl_loss
from .attacks import ddim_sample, finetune_attack
from .core.losses import Draws, draws_for, ldm_loss_latent
from .core.model import ToyLDM
from .data import VOCAB, subject_caption, tokenize
from .seeding import generator

REPORT_VERSION = 1
PROXY_NOTE = (
    "Face metrics (FDFR, ISM, SER-FQA) and learned IQA (BRISQUE, FID, NIQE, CLIP-Score) need pretrained "
    "networks; this report substitutes held-out denoising loss and subject-template MSE as proxies."
)

# psnr() of identical images
PSNR_IDENTICAL = math.inf


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(x, y) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``inf`` when identical."""
    a, b = _pair(x, y)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def linf(x, y) -> float:
    a, b = _pair(x, y)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def psnr_floor(linf_value: float) -> float:
    """Smallest PSNR any perturbation with this L-inf norm can have."""
    return PSNR_IDENTICAL if linf_value == 0 else 10.0 * math.log10(1.0 / linf_value**2)


def attention_energy(model: ToyLDM, x: torch.Tensor, f: torch.Tensor, draws: Draws) -> torch.Tensor:
    """Mean squared cross-attention entry: the zero-target semantic-disturbance loss."""
    return sdl_loss(model, x, f, draws, target=None)


def attention_energy_probe(model: ToyLDM, x: torch.Tensor, f: torch.Tensor, seed: int, n_draws: int = 16) -> float:
    draws = draws_for(model, generator(seed, "energy-probe"), n_draws, len(x), dtype=x.dtype)
    with torch.no_grad():
        return float(attention_energy(model, x, f, draws))


@dataclass(frozen=True)
class TrialConfig:
    seed: int = 0
    steps: int = 100
    lr: float = 5e-5
    draws_per_step: int = 4
    eval_draws: int = 16
    samples: int = 4
    sample_steps: int = 20
    subject_token: str = "sks0"


@dataclass
class TrialRecord:
    seed: int
    heldout_loss_clean: float
    heldout_loss_protected: float
    template_mse_clean: float
    template_mse_protected: float

    @property
    def win(self) -> bool:
        return self.heldout_loss_protected > self.heldout_loss_clean

    @property
    def tie(self) -> bool:
        return self.heldout_loss_protected == self.heldout_loss_clean

    @property
    def template_win(self) -> bool:
        return self.template_mse_protected > self.template_mse_clean

    def to_dict(self) -> dict:
        return {**asdict(self), "win": self.win, "tie": self.tie, "template_win": self.template_win}


def subject_eval(model: ToyLDM, heldout: torch.Tensor, template: torch.Tensor, cfg: TrialConfig) -> tuple[float, float]:
    f = model.embed(tokenize(subject_caption(cfg.subject_token))).detach()
    with torch.no_grad():
        z = model.encode(heldout)
        draws = draws_for(model, generator(cfg.seed, "trial-eval"), cfg.eval_draws, len(z), dtype=z.dtype)
        loss = float(ldm_loss_latent(model, z, f, draws))
    samples = ddim_sample(model, f, cfg.sample_steps, seed=cfg.seed, n=cfg.samples)
    mse = float(((samples - template) ** 2).mean())
    return loss, mse


def efficacy_trial(
    base: ToyLDM,
    clean: torch.Tensor,
    protected: torch.Tensor,
    heldout: torch.Tensor,
    template: torch.Tensor,
    cfg: TrialConfig,
) -> TrialRecord:
    """Personalize on the clean and on the protected set with identical seeds.

    Common random numbers make the two runs differ only by their images, so
    ``protected is clean`` yields an exact tie.
    """
    token = VOCAB[cfg.subject_token]
    runs = []
    for images in (clean, protected):
        tuned = finetune_attack(base, images, token, cfg.steps, cfg.lr, cfg.seed, cfg.draws_per_step)
        runs.append(subject_eval(tuned, heldout, template, cfg))
    (loss_c, mse_c), (loss_p, mse_p) = runs
    return TrialRecord(cfg.seed, loss_c, loss_p, mse_c, mse_p)


@dataclass
class MetricsReport:
    psnr: list[float]
    linf: list[float]
    linf_quantized: list[float] | None = None
    attention_energy_clean: float | None = None
    attention_energy_protected: float | None = None
    trials: list[dict] | None = None
    config: dict | None = None

    def to_dict(self) -> dict:
        finite = [p for p in self.psnr if math.isfinite(p)]
        summary = {
            "psnr_mean": float(np.mean(finite)) if finite else None,
            "psnr_min": min(self.psnr) if self.psnr else None,
            "linf_max": max(self.linf) if self.linf else None,
        }
        if self.linf_quantized:
            summary["linf_quantized_max"] = max(self.linf_quantized)
        if self.trials:
            summary["wins"] = sum(t["win"] for t in self.trials)
            summary["trials"] = len(self.trials)
        body = asdict(self)
        body["psnr"] = [p if math.isfinite(p) else "inf" for p in self.psnr]
        return {"report_version": REPORT_VERSION, "proxy_note": PROXY_NOTE, "summary": summary, **body}
