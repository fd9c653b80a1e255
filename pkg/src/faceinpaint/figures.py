"""Matplotlib renderings written next to the evaluation tables."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_cad(radius_frac: np.ndarray, with_stfg: np.ndarray, without: np.ndarray, path) -> None:
    """Mean CAD curve with and without guidance; inputs are (n_samples, n_radii)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for curves, label in ((without, "without guidance"), (with_stfg, "with guidance")):
        mean = curves.mean(0)
        sd = curves.std(0)
        ax.plot(radius_frac, mean, label=label)
        ax.fill_between(radius_frac, mean - sd, mean + sd, alpha=0.2)
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xlabel("radius / max radius")
    ax.set_ylabel("cumulative amplitude difference")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_score_maps(scores: list, timesteps: list, out_dir, sample: int = 0) -> list[Path]:
    """One PNG per (step, layer): ``score_t{t}_layer{l}.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, layers in zip(timesteps, scores):
        for l, m in enumerate(layers):
            p = out_dir / f"score_t{t}_layer{l}.png"
            plt.imsave(p, np.asarray(m[sample], dtype=np.float64), cmap="gray", vmin=0.0, vmax=1.0)
            paths.append(p)
    return paths


def plot_edit_grid(originals: np.ndarray, edits: dict, path, max_rows: int = 6) -> None:
    """Rows of samples, columns of original plus each named edit variant."""
    names = list(edits)
    n = min(max_rows, len(originals))
    fig, axes = plt.subplots(n, 1 + len(names), figsize=(1.4 * (1 + len(names)), 1.4 * n), squeeze=False)
    to_rgb = lambda x: np.clip((np.asarray(x).transpose(1, 2, 0) + 1) / 2, 0, 1)
    for i in range(n):
        axes[i, 0].imshow(to_rgb(originals[i]))
        for j, name in enumerate(names):
            axes[i, j + 1].imshow(to_rgb(edits[name][i]))
        for ax in axes[i]:
            ax.set_axis_off()
    for j, name in enumerate(["original", *names]):
        axes[0, j].set_title(name, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_losses(losses, path, window: int = 100) -> None:
    losses = np.asarray(losses)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(losses, lw=0.4, alpha=0.4)
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window - 1, len(losses)), smooth)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
