"""A from-scratch toy latent diffusion model.

Four parameter groups, one per top-level submodule of :class:`ToyLDM`:

* ``encoder``  – conv autoencoder half, image [B, 3, H, W] -> latent [B, C_z, H/4, W/4]
* ``decoder``  – latent -> image, clamped to [0, 1] by :meth:`ToyLDM.decode`
* ``unet``     – two-resolution noise predictor with one cross-attention layer per level
* ``embedder`` – token and position tables; a caption's embedding is one row per token
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .schedule import NoiseSchedule, build_schedule

GROUPS = ("encoder", "decoder", "unet", "embedder")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    latent_channels: int = 4
    ae_channels: tuple[int, int] = (8, 16)
    unet_channels: tuple[int, int] = (32, 64)
    n_heads: int = 2
    vocab_size: int = 64
    seq_len: int = 8
    d_embed: int = 32
    time_dim: int = 32
    norm_groups: int = 8
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("ae_channels", "unet_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


TINY_CONFIG = ModelConfig(ae_channels=(4, 8), unet_channels=(8, 16), d_embed=8, time_dim=8, norm_groups=4)


class AttentionCapture(NamedTuple):
    """Cross-attention probabilities in forward order.

    ``maps[i]`` has shape [B, n_heads, N_query, L_tok]; rows over the last axis
    are softmax outputs.
    """

    maps: list[torch.Tensor]
    layer_ids: list[str]


def cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``M = softmax(q k^T / sqrt(d))``, ``out = M v`` over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d = q.shape[-1]
    probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    return probs @ v, probs


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(min(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        out = self.conv1(F.silu(self.norm1(h)))
        out = out + self.temb(temb)[:, :, None, None]
        out = self.conv2(F.silu(self.norm2(out)))
        return self.skip(h) + out


class CrossAttention(nn.Module):
    """Spatial tokens attend to prompt tokens: Q from features, K and V from the prompt."""

    def __init__(self, channels: int, d_embed: int, n_heads: int, groups: int):
        super().__init__()
        if channels % n_heads:
            raise ValueError("channels must divide evenly into heads")
        self.n_heads = n_heads
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(d_embed, channels, bias=False)
        self.to_v = nn.Linear(d_embed, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, h: torch.Tensor, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, hh, ww = h.shape
        tokens = self.norm(h).flatten(2).transpose(1, 2)  # [B, N, C]
        q = self.to_q(tokens).reshape(b, hh * ww, self.n_heads, -1).transpose(1, 2)
        k = self.to_k(f).reshape(b, f.shape[1], self.n_heads, -1).transpose(1, 2)
        v = self.to_v(f).reshape(b, f.shape[1], self.n_heads, -1).transpose(1, 2)
        out, probs = cross_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, hh * ww, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, hh, ww)
        return h + out, probs


class UNet(nn.Module):
    layer_ids = ("down.attn", "mid.attn")

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1 = cfg.unet_channels
        g = cfg.norm_groups
        self.time_dim = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.res_down = ResBlock(c0, c0, cfg.time_dim, g)
        self.attn_down = CrossAttention(c0, cfg.d_embed, cfg.n_heads, g)
        self.downsample = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.res_mid = ResBlock(c1, c1, cfg.time_dim, g)
        self.attn_mid = CrossAttention(c1, cfg.d_embed, cfg.n_heads, g)
        self.res_up = ResBlock(c0 + c1, c0, cfg.time_dim, g)
        self.norm_out = nn.GroupNorm(min(g, c0), c0)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, f: torch.Tensor):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(z_t.dtype))
        h0 = self.res_down(self.conv_in(z_t), temb)
        h0, m0 = self.attn_down(h0, f)
        h1 = self.res_mid(self.downsample(h0), temb)
        h1, m1 = self.attn_mid(h1, f)
        up = F.interpolate(h1, scale_factor=2, mode="nearest")
        h = self.res_up(torch.cat([h0, up], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h))), [m0, m1]


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        a0, a1 = cfg.ae_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, a0, 3, padding=1), nn.SiLU(),
            nn.Conv2d(a0, a1, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(a1, a1, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(a1, cfg.latent_channels, 1),
        )
        # maps raw encoder output to roughly unit-variance latents; set after AE training
        self.register_buffer("latent_scale", torch.ones(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(2.0 * x - 1.0) * self.latent_scale


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        a0, a1 = cfg.ae_channels
        self.net = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, a1, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(a1, a1, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(a1, a0, 3, padding=1), nn.SiLU(),
            nn.Conv2d(a0, 3, 3, padding=1),
        )

    def forward(self, z: torch.Tensor, latent_scale: torch.Tensor) -> torch.Tensor:
        """Unclamped reconstruction."""
        return 0.5 * (self.net(z / latent_scale) + 1.0)


class Embedder(nn.Module):
    """Token table plus a learned position table (without positions, a prompt of
    repeated tokens would have identical rows and stay identical under tuning)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.table = nn.Embedding(cfg.vocab_size, cfg.d_embed)
        self.position = nn.Parameter(0.1 * torch.randn(cfg.seq_len, cfg.d_embed))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] > self.position.shape[0]:
            raise ValueError(f"token sequence longer than {self.position.shape[0]}")
        return self.table(tokens) + self.position[: tokens.shape[-1]]


class ToyLDM(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.encoder = Encoder(cfg)
            self.decoder = Decoder(cfg)
            self.unet = UNet(cfg)
            self.embedder = Embedder(cfg)
        self.schedule: NoiseSchedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.cfg.image_size // 4
        return (self.cfg.latent_channels, s, s)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3:] != (3, self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"expected images [..., 3, {self.cfg.image_size}, {self.cfg.image_size}], got {tuple(x.shape)}")
        return self.encoder(x)

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if z.shape[-3:] != self.latent_shape:
            raise ValueError(f"expected latents [..., {self.latent_shape}], got {tuple(z.shape)}")
        x = self.decoder(z, self.encoder.latent_scale)
        return x.clamp(0.0, 1.0) if clamp else x

    def embed(self, tokens) -> torch.Tensor:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        return self.embedder(tokens)

    def predict_noise(
        self,
        z_t: torch.Tensor,
        t,
        f: torch.Tensor,
        capture: bool = False,
        layers: list[str] | None = None,
    ):
        """Predict the noise in ``z_t`` [B, C_z, h, w] at timestep(s) ``t`` given prompt ``f``.

        ``f`` is [L_tok, d_embed] (shared by the batch) or [B, L_tok, d_embed].
        With ``capture=True`` returns ``(eps_hat, AttentionCapture)``, restricted
        to ``layers`` when given; otherwise ``(eps_hat, None)``.
        """
        if z_t.shape[-3:] != self.latent_shape:
            raise ValueError(f"expected latents [..., {self.latent_shape}], got {tuple(z_t.shape)}")
        if layers is not None:
            unknown = set(layers) - set(UNet.layer_ids)
            if unknown:
                raise KeyError(f"unknown attention layer(s) {sorted(unknown)}; have {UNet.layer_ids}")
        b = z_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if int(t.min()) < 1 or int(t.max()) > self.cfg.T:
            raise ValueError(f"timestep out of range 1..{self.cfg.T}")
        if f.dim() == 2:
            f = f.unsqueeze(0).expand(b, -1, -1)
        if f.shape[-1] != self.cfg.d_embed:
            raise ValueError(f"embedding width {f.shape[-1]} != {self.cfg.d_embed}")
        eps_hat, maps = self.unet(z_t, t, f)
        if not capture:
            return eps_hat, None
        ids = list(UNet.layer_ids)
        if layers is not None:
            keep = [i for i, lid in enumerate(ids) if lid in layers]
            maps = [maps[i] for i in keep]
            ids = [ids[i] for i in keep]
        return eps_hat, AttentionCapture(maps, ids)


def parameter_group(name: str) -> str:
    return name.split(".", 1)[0]


def group_checksum(model: nn.Module, group: str) -> str:
    """SHA-256 over the raw bytes of every tensor in a group (parameters and buffers)."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        if parameter_group(name) == group:
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def checksums(model: nn.Module) -> dict[str, str]:
    return {g: group_checksum(model, g) for g in GROUPS}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
