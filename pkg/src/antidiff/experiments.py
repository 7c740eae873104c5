"""Seed sweeps: subject sampling, efficacy trials, edit amplification and the ablation grids."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import data
from .attacks import edit_attack
from .core.model import ToyLDM
from .metrics import TrialConfig, attention_energy_probe, efficacy_trial, linf, psnr
from .pipeline import ProtectionConfig, ProtectionResult, protect
from .prompt import PromptTuneConfig, init_empty_embedding, tune_prompt
from .seeding import derive_seed

log = logging.getLogger(__name__)

# (label, prompt_tuning, sdl_weight) rows of the PT x SDL grid
PT_SDL_GRID = (
    ("baseline", False, 0.0),
    ("+PT", True, 0.0),
    ("+SDL", False, 1.0),
    ("PT+SDL", True, 1.0),
)
TARGET_GRID = ("zero", "noise", "diagonal")


@dataclass
class Subject:
    identity: data.Identity
    clean: torch.Tensor
    heldout: torch.Tensor
    template: torch.Tensor


def make_subject(seed: int, n_protect: int = 4, n_heldout: int = 4) -> Subject:
    """Pick an identity and render disjoint protect/held-out variants from ``seed``."""
    rng = np.random.default_rng(seed)
    ids = data.all_identities()
    ident = ids[int(rng.integers(len(ids)))]
    imgs = torch.as_tensor(data.subject_images(ident, n_protect + n_heldout, seed=seed + 7919))
    return Subject(ident, imgs[:n_protect], imgs[n_protect:], torch.as_tensor(data.template(ident)))


def edit_target(identity: data.Identity, shape: str = "circle") -> list[str]:
    """The identity's caption with the shape swapped (to ``square`` if it already is ``shape``)."""
    words = identity.caption()
    words[-1] = shape if identity.shape != shape else "square"
    return words


@dataclass
class SeedOutcome:
    seed: int
    identity: str
    psnr_mean: float
    linf: float
    trial: dict
    energy_clean: float
    energy_protected: float
    edit_mse: float
    perturbation_power: float
    # energies under the run's own final embedding (differs between ablation rows)
    energy_own_clean: float = float("nan")
    energy_own_protected: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def probe_embedding(model: ToyLDM, clean: torch.Tensor, seed: int, prompt: PromptTuneConfig = PromptTuneConfig()) -> torch.Tensor:
    """The subject concept an attacker would learn from the clean images.

    Prompt tuning on the clean set with a seed-derived stream; it does not
    depend on the protection configuration, so attention energies measured
    with it are comparable across ablation rows.
    """
    f0 = init_empty_embedding(model)
    return tune_prompt(model, clean, f0, replace(prompt, seed=derive_seed(seed, "energy-probe-prompt"))).embedding


def evaluate_seed(
    model: ToyLDM,
    cfg: ProtectionConfig,
    seed: int,
    trial: TrialConfig = TrialConfig(),
    t_edit_frac: float = 0.6,
    result: ProtectionResult | None = None,
) -> tuple[SeedOutcome, ProtectionResult]:
    subject = make_subject(seed)
    cfg = replace(cfg, seed=seed)
    if result is None:
        result = protect(subject.clean, model, cfg)
    prot = result.images
    rec = efficacy_trial(model, subject.clean, prot, subject.heldout, subject.template, replace(trial, seed=seed))
    f_edit = model.embed(data.tokenize(edit_target(subject.identity))).detach()
    e_clean = edit_attack(model, subject.clean, f_edit, t_edit_frac, seed)
    e_prot = edit_attack(model, prot, f_edit, t_edit_frac, seed)
    f_probe = probe_embedding(model, subject.clean, seed)
    outcome = SeedOutcome(
        seed=seed,
        identity=subject.identity.name,
        psnr_mean=float(np.mean([psnr(c, p) for c, p in zip(subject.clean, prot)])),
        linf=linf(subject.clean, prot),
        trial=rec.to_dict(),
        energy_clean=attention_energy_probe(model, subject.clean, f_probe, seed),
        energy_protected=attention_energy_probe(model, prot, f_probe, seed),
        edit_mse=float(((e_clean - e_prot) ** 2).mean()),
        perturbation_power=float(((prot - subject.clean) ** 2).mean()),
        energy_own_clean=attention_energy_probe(model, subject.clean, result.embedding, seed),
        energy_own_protected=attention_energy_probe(model, prot, result.embedding, seed),
    )
    log.info("seed %d: %s", seed, outcome)
    return outcome, result


def sweep(model: ToyLDM, cfg: ProtectionConfig, seeds, trial: TrialConfig = TrialConfig(), t_edit_frac: float = 0.6):
    return [evaluate_seed(model, cfg, s, trial, t_edit_frac)[0] for s in seeds]


def summarize(label: str, outcomes: list[SeedOutcome]) -> dict:
    wins = sum(o.trial["win"] for o in outcomes)
    return {
        "label": label,
        "seeds": len(outcomes),
        "wins": wins,
        "win_rate": wins / max(len(outcomes), 1),
        "attention_energy_clean": float(np.mean([o.energy_clean for o in outcomes])),
        "attention_energy_protected": float(np.mean([o.energy_protected for o in outcomes])),
        "attention_energy_own_protected": float(np.mean([o.energy_own_protected for o in outcomes])),
        "heldout_gap_mean": float(np.mean([o.trial["heldout_loss_protected"] - o.trial["heldout_loss_clean"] for o in outcomes])),
        "psnr_mean": float(np.mean([o.psnr_mean for o in outcomes])),
        "linf_max": max(o.linf for o in outcomes),
        "edit_mse_mean": float(np.mean([o.edit_mse for o in outcomes])),
    }


def ablation_configs(grid: str, base: ProtectionConfig) -> list[tuple[str, ProtectionConfig]]:
    if grid == "pt,sdl":
        return [(label, replace(base, prompt_tuning=pt, sdl_weight=w)) for label, pt, w in PT_SDL_GRID]
    if grid == "target":
        return [(kind, replace(base, attention_target=kind)) for kind in TARGET_GRID]
    raise ValueError(f"unknown ablation grid {grid!r}; use 'pt,sdl' or 'target'")


def run_ablation(model: ToyLDM, grid: str, seeds, base: ProtectionConfig = ProtectionConfig(), trial: TrialConfig = TrialConfig()):
    """Returns ``(summary_rows, per_seed)`` where ``per_seed[label]`` lists :class:`SeedOutcome`."""
    rows, per_seed = [], {}
    for label, cfg in ablation_configs(grid, base):
        outcomes = sweep(model, cfg, seeds, trial)
        per_seed[label] = outcomes
        rows.append(summarize(label, outcomes))
    return rows, per_seed
