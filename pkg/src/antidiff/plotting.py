"""Figures written next to the CSV/JSON reports. Headless (Agg) only."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _hwc(x) -> np.ndarray:
    arr = x.detach().cpu().numpy() if hasattr(x, "detach") else np.asarray(x)
    return np.clip(arr.transpose(1, 2, 0), 0, 1)


def plot_cost_traces(epochs: list[dict], path: str | Path) -> Path:
    """PGD cost per iteration, one line per epoch."""
    fig, (ax_c, ax_s) = plt.subplots(1, 2, figsize=(9, 3.4))
    cmap = plt.get_cmap("viridis")
    n = max(len(epochs), 1)
    for i, ep in enumerate(epochs):
        trace = np.asarray(ep["cost_trace"], dtype=float)
        if trace.size == 0:
            continue
        color = cmap(i / max(n - 1, 1))
        ax_c.plot(trace[:, 0], trace[:, 1], color=color, lw=1, label=f"epoch {ep['epoch']}")
        ax_s.plot(trace[:, 0], trace[:, 3], color=color, lw=1)
    ax_c.set_xlabel("PGD iteration")
    ax_c.set_ylabel("cost (URL + SDL)")
    ax_s.set_xlabel("PGD iteration")
    ax_s.set_ylabel("SDL term")
    if len(epochs) <= 10:
        ax_c.legend(fontsize=6, ncol=2)
    return _finish(fig, path)


def plot_gallery(rows: dict[str, list], path: str | Path) -> Path:
    """Image grid: one labelled row per entry, images [3, H, W] in [0, 1]."""
    n_rows = len(rows)
    n_cols = max(len(v) for v in rows.values())
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.3 * n_cols + 0.8, 1.3 * n_rows), squeeze=False)
    for r, (label, imgs) in enumerate(rows.items()):
        for c in range(n_cols):
            ax = axes[r][c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < len(imgs):
                ax.imshow(_hwc(imgs[c]), interpolation="nearest")
            else:
                ax.axis("off")
        axes[r][0].set_ylabel(label, fontsize=7)
    return _finish(fig, path)


def plot_perturbation(clean, protected, path: str | Path, eta: float) -> Path:
    """Clean, protected, and the signed perturbation rescaled so +-eta spans the colormap."""
    n = len(clean)
    fig, axes = plt.subplots(3, n, figsize=(1.4 * n + 0.8, 4.2), squeeze=False)
    for i in range(n):
        delta = (np.asarray(protected[i], dtype=float) - np.asarray(clean[i], dtype=float)).mean(axis=0)
        axes[0][i].imshow(_hwc(clean[i]), interpolation="nearest")
        axes[1][i].imshow(_hwc(protected[i]), interpolation="nearest")
        axes[2][i].imshow(delta, cmap="RdBu", vmin=-eta, vmax=eta, interpolation="nearest")
        for r in range(3):
            axes[r][i].set_xticks([])
            axes[r][i].set_yticks([])
    for r, label in enumerate(("clean", "protected", "delta")):
        axes[r][0].set_ylabel(label, fontsize=8)
    return _finish(fig, path)


def plot_ablation(rows: list[dict], path: str | Path, label_key: str = "label") -> Path:
    """Win rate and mean protected attention energy per configuration."""
    labels = [r[label_key] for r in rows]
    x = np.arange(len(rows))
    fig, (ax_w, ax_e) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax_w.bar(x, [r["win_rate"] for r in rows], color="tab:blue")
    ax_w.set_ylim(0, 1)
    ax_w.set_ylabel("efficacy win rate")
    energy = [r.get("attention_energy_protected", math.nan) for r in rows]
    ax_e.bar(x, energy, color="tab:orange")
    ax_e.set_ylabel("protected attention energy")
    for ax in (ax_w, ax_e):
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=20, fontsize=7)
    return _finish(fig, path)


def plot_psnr_hist(psnr_values: list[float], floor: float, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    finite = [p for p in psnr_values if math.isfinite(p)]
    ax.hist(finite, bins=max(5, len(finite) // 2), color="tab:gray")
    ax.axvline(floor, color="tab:red", ls="--", label=f"floor {floor:.2f} dB")
    ax.set_xlabel("PSNR (dB)")
    ax.set_ylabel("images")
    ax.legend(fontsize=7)
    return _finish(fig, path)
