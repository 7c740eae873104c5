"""Procedural toy subjects: shape x color x texture identities with token captions.

Every identity renders as an anti-aliased glyph on a tinted background. Nuisance
factors (offset, scale, background level) vary per image; the canonical render
of an identity (centered, nominal scale, mid background) is its *template*.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "magenta": (0.90, 0.20, 0.85),
    "cyan": (0.15, 0.85, 0.90),
}
TEXTURES = ("solid", "stripes", "checker")

PAD = "<pad>"
BASE_WORDS = ("a", "photo", "of", "object")
N_SUBJECT_TOKENS = 8
VOCAB_SIZE = 64


def _build_vocab() -> dict[str, int]:
    words = [PAD, *BASE_WORDS, *SHAPES, *COLORS, *TEXTURES]
    words += [f"sks{i}" for i in range(N_SUBJECT_TOKENS)]
    words += [f"<unused{i}>" for i in range(VOCAB_SIZE - len(words))]
    return {w: i for i, w in enumerate(words)}


VOCAB = _build_vocab()
PAD_ID = VOCAB[PAD]
SEQ_LEN = 8


def tokenize(words: list[str] | str, seq_len: int = SEQ_LEN) -> list[int]:
    """Map words to ids and right-pad with the pad token."""
    if isinstance(words, str):
        words = words.split()
    if len(words) > seq_len:
        raise ValueError(f"caption has {len(words)} tokens, limit is {seq_len}")
    try:
        ids = [VOCAB[w] for w in words]
    except KeyError as exc:
        raise ValueError(f"unknown token {exc.args[0]!r}") from None
    return ids + [PAD_ID] * (seq_len - len(ids))


@dataclass(frozen=True)
class Identity:
    shape: str
    color: str
    texture: str

    @property
    def name(self) -> str:
        return f"{self.color}-{self.texture}-{self.shape}"

    def caption(self) -> list[str]:
        return ["a", "photo", "of", self.color, self.texture, self.shape]

    @classmethod
    def parse(cls, name: str) -> "Identity":
        color, texture, shape = name.split("-")
        if shape not in SHAPES or color not in COLORS or texture not in TEXTURES:
            raise ValueError(f"unknown identity {name!r}")
        return cls(shape, color, texture)


def augment_caption(identity: Identity, rng: np.random.Generator, p_drop: float) -> list[str]:
    """Randomly omit color/texture and replace the shape by the class noun ``object``."""
    words = ["a", "photo", "of"]
    if rng.random() >= p_drop:
        words.append(identity.color)
    if rng.random() >= p_drop:
        words.append(identity.texture)
    words.append(identity.shape if rng.random() >= p_drop else "object")
    return words


def all_identities() -> list[Identity]:
    return [Identity(s, c, t) for s, c, t in itertools.product(SHAPES, COLORS, TEXTURES)]


def subject_caption(subject_token: str = "sks0") -> list[str]:
    """DreamBooth-style instance prompt, e.g. ``a photo of sks0 object``."""
    return ["a", "photo", "of", subject_token, "object"]


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v: coordinates in units of the glyph radius, origin at its center
    if shape == "circle":
        return u**2 + v**2 <= 1.0
    if shape == "square":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if shape == "triangle":
        return (v <= 0.8) & (v >= 2.0 * np.abs(u) - 1.1)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.1
    if shape == "cross":
        return ((np.abs(u) <= 0.35) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.35) & (np.abs(u) <= 1.0))
    if shape == "ring":
        r2 = u**2 + v**2
        return (r2 <= 1.0) & (r2 >= 0.3)
    raise ValueError(f"unknown shape {shape!r}")


def _texture_gain(texture: str, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    # px, py in output pixel units; periods are kept coarse so a 4x-downsampling
    # autoencoder can represent them
    if texture == "solid":
        return np.ones_like(px)
    if texture == "stripes":
        return np.where(np.floor(px / 4.0) % 2 == 0, 1.0, 0.45)
    if texture == "checker":
        return np.where((np.floor(px / 4.0) + np.floor(py / 4.0)) % 2 == 0, 1.0, 0.45)
    raise ValueError(f"unknown texture {texture!r}")


def render(
    identity: Identity,
    size: int = 32,
    offset: tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
    background: float = 0.2,
    supersample: int = 4,
) -> np.ndarray:
    """Render one image as a float32 array of shape [3, size, size] in [0, 1]."""
    n = size * supersample
    coords = (np.arange(n) + 0.5) / supersample
    py, px = np.meshgrid(coords, coords, indexing="ij")
    radius = 0.3 * size * scale
    cx = size / 2 + offset[0]
    cy = size / 2 + offset[1]
    mask = _shape_mask(identity.shape, (px - cx) / radius, (py - cy) / radius)
    gain = _texture_gain(identity.texture, px - cx, py - cy)
    color = np.asarray(COLORS[identity.color])[:, None, None]
    fg = color * gain[None]
    img = np.where(mask[None], fg, background)
    img = img.reshape(3, size, supersample, size, supersample).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def template(identity: Identity, size: int = 32) -> np.ndarray:
    """Canonical render used as the identity reference."""
    return render(identity, size=size)


def render_variant(identity: Identity, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    offset = tuple(rng.uniform(-2.5, 2.5, size=2))
    scale = rng.uniform(0.85, 1.15)
    background = rng.uniform(0.1, 0.35)
    return render(identity, size=size, offset=offset, scale=scale, background=background)


@dataclass
class ToyDataset:
    """Images [N, 3, H, W] with token captions [N, L] and identity labels."""

    images: np.ndarray
    tokens: np.ndarray
    identities: list[Identity]

    def __len__(self) -> int:
        return len(self.images)

    def split(self, holdout_fraction: float, seed: int) -> tuple["ToyDataset", "ToyDataset"]:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        n_hold = max(1, int(round(holdout_fraction * len(self))))
        hold, train = order[:n_hold], order[n_hold:]
        return self.subset(train), self.subset(hold)

    def subset(self, index) -> "ToyDataset":
        index = np.asarray(index)
        return ToyDataset(self.images[index], self.tokens[index], [self.identities[i] for i in index])


def generate_dataset(
    per_identity: int = 8,
    seed: int = 0,
    size: int = 32,
    identities: list[Identity] | None = None,
) -> ToyDataset:
    """Render ``per_identity`` variants of every identity with their captions."""
    rng = np.random.default_rng(seed)
    identities = identities if identities is not None else all_identities()
    images, tokens, labels = [], [], []
    for ident in identities:
        ids = tokenize(ident.caption())
        for _ in range(per_identity):
            images.append(render_variant(ident, rng, size=size))
            tokens.append(ids)
            labels.append(ident)
    return ToyDataset(np.stack(images), np.asarray(tokens, dtype=np.int64), labels)


def subject_images(identity: Identity, n: int, seed: int, size: int = 32) -> np.ndarray:
    """``n`` nuisance variants of one identity, [n, 3, H, W]."""
    rng = np.random.default_rng(seed)
    return np.stack([render_variant(identity, rng, size=size) for _ in range(n)])
