"""Adversarial image protection against latent-diffusion personalization and editing, at toy scale."""
from .adversarial import AttackConfig, PerturbationBudget, attack, cost, make_target, project, sdl_loss, url_loss
from .attacks import ddim_sample, edit_attack, finetune_attack
from .core.checkpoint import load_embedding, load_model, save_embedding, save_model
from .core.losses import Draws, draws_for, ldm_loss
from .core.model import ModelConfig, ToyLDM
from .core.train import PretrainConfig, pretrain_toy
from .errors import DivergenceError
from .metrics import MetricsReport, TrialConfig, attention_energy, efficacy_trial, linf, psnr
from .pipeline import ProtectionConfig, ProtectionResult, protect
from .prompt import PromptTuneConfig, tune_prompt
from .surrogate import unet_update

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "DivergenceError", "Draws", "MetricsReport", "ModelConfig", "PerturbationBudget",
    "PretrainConfig", "PromptTuneConfig", "ProtectionConfig", "ProtectionResult", "ToyLDM", "TrialConfig",
    "attack", "attention_energy", "cost", "ddim_sample", "draws_for", "edit_attack", "efficacy_trial",
    "finetune_attack", "ldm_loss", "linf", "load_embedding", "load_model", "make_target", "pretrain_toy",
    "project", "protect", "psnr", "save_embedding", "save_model", "sdl_loss", "tune_prompt", "unet_update",
    "url_loss",
]
