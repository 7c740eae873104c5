"""The N-epoch loop: prompt tuning -> PGD -> surrogate UNet update, with state threaded through."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace

import torch

from .adversarial import AttackConfig, PerturbationBudget, attack, make_target
from .core.model import ToyLDM
from .data import tokenize
from .errors import DivergenceError
from .metrics import linf
from .prompt import PromptTuneConfig, init_empty_embedding, tune_prompt
from .seeding import derive_seed
from .surrogate import unet_update

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProtectionConfig:
    epochs: int = 10
    seed: int = 0
    prompt: PromptTuneConfig = PromptTuneConfig()
    budget: PerturbationBudget = PerturbationBudget()
    attack_draws: int = 4
    surrogate_steps: int = 20
    surrogate_lr: float = 1e-3
    # ablation switches
    prompt_tuning: bool = True
    fixed_prompt: str = "a photo of object"
    url_weight: float = 1.0
    sdl_weight: float = 1.0
    attention_target: str = "zero"
    attention_layers: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProtectionConfig":
        d = dict(d)
        if "prompt" in d:
            d["prompt"] = PromptTuneConfig(**d["prompt"])
        if "budget" in d:
            d["budget"] = PerturbationBudget(**d["budget"])
        if d.get("attention_layers") is not None:
            d["attention_layers"] = tuple(d["attention_layers"])
        return cls(**d)


@dataclass(frozen=True)
class StageSeeds:
    prompt: int
    attack: int
    surrogate: int


def stage_seeds(master_seed: int, epoch: int) -> StageSeeds:
    return StageSeeds(
        prompt=derive_seed(master_seed, "epoch", epoch, "prompt"),
        attack=derive_seed(master_seed, "epoch", epoch, "attack"),
        surrogate=derive_seed(master_seed, "epoch", epoch, "surrogate"),
    )


@dataclass
class EpochLog:
    epoch: int
    prompt_probe_before: float | None
    prompt_probe_after: float | None
    unet_probe_before: float
    unet_probe_after: float
    linf: float
    cost_trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProtectionResult:
    images: torch.Tensor
    embedding: torch.Tensor
    model: ToyLDM
    epochs: list[EpochLog]


def initial_embedding(model: ToyLDM, cfg: ProtectionConfig) -> torch.Tensor:
    if cfg.prompt_tuning:
        return init_empty_embedding(model)
    with torch.no_grad():
        return model.embed(tokenize(cfg.fixed_prompt)).clone()


def protect(images: torch.Tensor, base: ToyLDM, cfg: ProtectionConfig) -> ProtectionResult:
    """Protect one subject's images [B, 3, H, W] (they share one tuned embedding).

    ``base`` is left untouched; the surrogate starts as a copy of it and evolves
    across epochs.
    """
    if images.dim() != 4 or images.shape[0] == 0:
        raise ValueError("expected a nonempty batch [B, 3, H, W]")
    clean = images.detach().clone()
    model = copy.deepcopy(base)
    f = initial_embedding(model, cfg)
    target = make_target(cfg.attention_target, model, seed=cfg.seed)
    x = clean.clone()
    logs = []
    for epoch in range(cfg.epochs):
        seeds = stage_seeds(cfg.seed, epoch)
        stage = "prompt"
        try:
            pt_before = pt_after = None
            if cfg.prompt_tuning:
                pt = tune_prompt(model, x, f, replace(cfg.prompt, seed=seeds.prompt))
                f, pt_before, pt_after = pt.embedding, pt.probe_before, pt.probe_after
            stage = "attack"
            acfg = AttackConfig(
                budget=cfg.budget,
                draws_per_step=cfg.attack_draws,
                url_weight=cfg.url_weight,
                sdl_weight=cfg.sdl_weight,
                layers=cfg.attention_layers,
                seed=seeds.attack,
            )
            adv = attack(model, x, clean, f, target, acfg)
            x = adv.image
            stage = "surrogate"
            upd = unet_update(model, x, f, cfg.surrogate_steps, cfg.surrogate_lr, seeds.surrogate, cfg.attack_draws)
            model = upd.model
        except DivergenceError as exc:
            exc.context.update(epoch=epoch, stage=stage)
            raise
        budget_gap = linf(x, clean)
        if budget_gap > cfg.budget.eta:
            raise RuntimeError(f"epoch {epoch}: budget violated ({budget_gap} > {cfg.budget.eta})")
        logs.append(EpochLog(epoch, pt_before, pt_after, upd.probe_before, upd.probe_after, budget_gap, adv.trace))
        log.info("epoch %d: cost %.5f -> %.5f, linf %.4f", epoch, adv.trace[0][1] if adv.trace else float("nan"),
                 adv.trace[-1][1] if adv.trace else float("nan"), budget_gap)
    return ProtectionResult(x, f, model, logs)
