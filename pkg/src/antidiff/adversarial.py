"""Stage 2: UNet-reverse and semantic-disturbance losses, and signed-gradient PGD.

The cost ``url_loss + sdl_loss`` is *minimized*: ``url_loss`` is already the
negated denoising error, so descending it raises the model's error, while the
attention term pulls cross-attention maps toward the target (zero by default).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Union

import torch

from .core.losses import Draws, draws_for, ldm_loss, noisy_forward
from .core.model import AttentionCapture, ToyLDM
from .errors import DivergenceError
from .seeding import generator

log = logging.getLogger(__name__)

# None or 0 -> zero map; a tensor broadcasting against every layer's map;
# or one tensor per layer id
Target = Union[None, float, torch.Tensor, dict]


@dataclass(frozen=True)
class PerturbationBudget:
    eta: float = 0.05
    alpha: float = 0.005
    steps: int = 50

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class PgdState:
    x_ref: torch.Tensor
    x_p: torch.Tensor
    p: int = 0
    cost_history: list = field(default_factory=list)


class CostTerms(NamedTuple):
    total: torch.Tensor
    url: torch.Tensor
    sdl: torch.Tensor


def url_loss(model: ToyLDM, x: torch.Tensor, f: torch.Tensor, draws: Draws) -> torch.Tensor:
    return -ldm_loss(model, x, f, draws)


def _target_for(target: Target, layer_id: str, m: torch.Tensor) -> torch.Tensor | float:
    if target is None:
        return 0.0
    if isinstance(target, dict):
        try:
            target = target[layer_id]
        except KeyError:
            raise ValueError(f"no attention target for layer {layer_id!r}") from None
    if isinstance(target, (int, float)):
        return float(target)
    target = target.to(m.dtype)
    try:
        torch.broadcast_shapes(target.shape, m.shape)
    except RuntimeError:
        raise ValueError(f"target shape {tuple(target.shape)} incompatible with map {tuple(m.shape)} at {layer_id}") from None
    return target


def attention_distance(capture: AttentionCapture, target: Target = None) -> torch.Tensor:
    """Mean-square distance to the target, averaged within each layer, then over layers."""
    per_layer = []
    for lid, m in zip(capture.layer_ids, capture.maps):
        per_layer.append(((m - _target_for(target, lid, m)) ** 2).mean())
    return torch.stack(per_layer).mean()


def sdl_loss(
    model: ToyLDM,
    x: torch.Tensor,
    f: torch.Tensor,
    draws: Draws,
    target: Target = None,
    layers: list[str] | None = None,
) -> torch.Tensor:
    _, _, cap = noisy_forward(model, x, f, draws, capture=True, layers=layers)
    return attention_distance(cap, target)


def cost_terms(
    model: ToyLDM,
    x: torch.Tensor,
    f: torch.Tensor,
    draws: Draws,
    target: Target = None,
    url_weight: float = 1.0,
    sdl_weight: float = 1.0,
    layers: list[str] | None = None,
) -> CostTerms:
    """Both terms from one forward pass, so they share the draws."""
    eps, eps_hat, cap = noisy_forward(model, x, f, draws, capture=True, layers=layers)
    url = -((eps - eps_hat) ** 2).mean()
    sdl = attention_distance(cap, target)
    total = url_weight * url + sdl_weight * sdl
    return CostTerms(total, url, sdl)


def cost(model, x, f, draws, target: Target = None, url_weight=1.0, sdl_weight=1.0, layers=None) -> torch.Tensor:
    return cost_terms(model, x, f, draws, target, url_weight, sdl_weight, layers).total


def project(x: torch.Tensor, x_ref: torch.Tensor, eta: float) -> torch.Tensor:
    """Closest point of the L-inf ball around ``x_ref`` intersected with [0, 1].

    The bound holds exactly when measured in float64: float32 rounding of
    ``eta`` and of ``x_ref +- eta`` can land a few ulps outside, so such
    entries step back inward one ulp at a time.
    """
    eta_t = torch.tensor(eta, dtype=x.dtype)
    out = torch.maximum(torch.minimum(x, x_ref + eta_t), x_ref - eta_t).clamp(0.0, 1.0)
    ref64 = x_ref.double()
    outside = (out.double() - ref64).abs() > eta
    while outside.any():
        out = torch.where(outside, torch.nextafter(out, x_ref), out)
        outside = (out.double() - ref64).abs() > eta
    return out


def pgd_step(state: PgdState, grad: torch.Tensor, budget: PerturbationBudget) -> PgdState:
    """``x_{p+1} = Proj(x_p - alpha * sign(grad))``."""
    if grad.shape != state.x_p.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != iterate shape {tuple(state.x_p.shape)}")
    candidate = state.x_p - abs(budget.alpha) * torch.sign(grad)
    x_next = project(candidate, state.x_ref, budget.eta)
    return PgdState(state.x_ref, x_next, state.p + 1, list(state.cost_history))


class AttackResult(NamedTuple):
    image: torch.Tensor
    # one row per iteration: (p, cost, url, sdl, grad_norm)
    trace: list


@dataclass(frozen=True)
class AttackConfig:
    budget: PerturbationBudget = PerturbationBudget()
    draws_per_step: int = 4
    url_weight: float = 1.0
    sdl_weight: float = 1.0
    layers: tuple[str, ...] | None = None
    seed: int = 0

    def with_seed(self, seed: int) -> "AttackConfig":
        return replace(self, seed=seed)


def attack(
    model: ToyLDM,
    x_start: torch.Tensor,
    x_ref: torch.Tensor,
    f: torch.Tensor,
    target: Target,
    cfg: AttackConfig,
) -> AttackResult:
    """Run ``cfg.budget.steps`` PGD iterations from ``x_start``, projecting around ``x_ref``.

    Fresh draws are taken every iteration. Model weights receive no gradient.
    """
    budget = cfg.budget
    if x_start.shape != x_ref.shape:
        raise ValueError("x_start and x_ref differ in shape")
    gap = float((x_start.double() - x_ref.double()).abs().max()) if x_start.numel() else 0.0
    if gap > budget.eta:
        raise ValueError(f"x_start lies {gap:.6f} from x_ref, outside the budget {budget.eta}")
    f = f.detach()
    layers = list(cfg.layers) if cfg.layers is not None else None
    gen = generator(cfg.seed, "pgd")
    state = PgdState(x_ref.detach(), x_start.detach().clone())
    trace = []
    for p in range(budget.steps):
        draws = draws_for(model, gen, cfg.draws_per_step, len(x_ref), dtype=x_ref.dtype)
        x = state.x_p.clone().requires_grad_(True)
        terms = cost_terms(model, x, f, draws, target, cfg.url_weight, cfg.sdl_weight, layers)
        (grad,) = torch.autograd.grad(terms.total, x)
        if not bool(torch.isfinite(grad).all()) or not bool(torch.isfinite(terms.total)):
            raise DivergenceError("non-finite PGD gradient", {"iteration": p, "iterate": state.x_p.detach().clone()})
        row = (p, terms.total.item(), terms.url.item(), terms.sdl.item(), grad.norm().item())
        state.cost_history.append(row[1])
        trace.append(row)
        state = pgd_step(state, grad, budget)
    return AttackResult(state.x_p, trace)


def write_trace_csv(trace: list, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "cost", "url", "sdl", "grad_norm"])
        w.writerows(trace)


def make_target(kind: str, model: ToyLDM, seed: int = 0) -> Target:
    """Attention targets for the ablation: ``zero``, ``noise`` (uniform [0, 1)) or ``diagonal``."""
    if kind == "zero":
        return None
    shapes = attention_shapes(model)
    gen = generator(seed, "attention-target")
    out = {}
    for lid, (n_query, n_tok) in shapes.items():
        if kind == "noise":
            out[lid] = torch.rand((n_query, n_tok), generator=gen)
        elif kind == "diagonal":
            out[lid] = torch.eye(n_query, n_tok)
        else:
            raise ValueError(f"unknown attention target {kind!r}")
    return out


def attention_shapes(model: ToyLDM) -> dict[str, tuple[int, int]]:
    """(N_query, L_tok) per cross-attention layer."""
    s = model.cfg.image_size // 4
    return {"down.attn": (s * s, model.cfg.seq_len), "mid.attn": ((s // 2) ** 2, model.cfg.seq_len)}
