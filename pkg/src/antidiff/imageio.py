"""8-bit RGB PNG codec for [3, H, W] float images; quantization is ``round(x * 255) / 255``."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


class UnsupportedImageError(ValueError):
    pass


def quantize(x) -> np.ndarray:
    """Float image [3, H, W] in [0, 1] -> uint8 [H, W, 3] (round half up)."""
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    arr = np.clip(arr.astype(np.float64), 0.0, 1.0)
    # half-up rounding; np.round would round halves to even
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def quantize_within_budget(x, x_ref, eta: float) -> np.ndarray:
    """Like :func:`quantize`, but codes that land more than ``eta`` from ``x_ref``
    take one step back toward it.

    ``x`` is assumed to lie within ``eta`` of ``x_ref``, so one step always
    suffices: rounding moves a value by at most half a code.
    """
    q = quantize(x).astype(np.int16)
    ref = x_ref.detach().cpu().double().numpy() if isinstance(x_ref, torch.Tensor) else np.asarray(x_ref, np.float64)
    ref = ref.transpose(1, 2, 0)
    over = np.abs(q / 255.0 - ref) > eta
    q[over] -= np.sign(q[over] / 255.0 - ref[over]).astype(np.int16)
    return q.astype(np.uint8)


def dequantize(u8: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(u8.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def save_image(x, path: str | Path) -> None:
    save_u8(quantize(x), path)


def save_u8(u8: np.ndarray, path: str | Path) -> None:
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        if im.format != "PNG":
            raise UnsupportedImageError(f"{path}: not a PNG ({im.format})")
        if im.mode != "RGB":
            raise UnsupportedImageError(f"{path}: color type {im.mode!r}, need 8-bit RGB without alpha")
        arr = np.asarray(im, dtype=np.uint8)
    return dequantize(arr)


def save_batch(images, directory: str | Path, names: list[str] | None = None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = names or [f"{i:03d}.png" for i in range(len(images))]
    paths = []
    for img, name in zip(images, names):
        p = directory / name
        save_image(img, p)
        paths.append(p)
    return paths


def load_dir(directory: str | Path) -> tuple[torch.Tensor, list[str]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    files = sorted(directory.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {directory}")
    return torch.stack([load_image(p) for p in files]), [p.name for p in files]
