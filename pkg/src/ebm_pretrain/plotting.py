"""Figures written by the report commands. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from ebm_pretrain.data import write_png  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _to_uint8(x01: torch.Tensor) -> np.ndarray:
    """``[c, h, w]`` floats in [0, 1] -> ``[h, w, 3]`` uint8."""
    a = x01.detach().double().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(a * 255.0).astype(np.uint8)


def energy_histogram_figure(report, path: str | Path, title: str = "Energy scores") -> Path:
    """Overlaid histograms of real, corrupted (step 0) and restored energies."""
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        cmap = plt.get_cmap("viridis")
        steps = [k for k in report.groups if k.startswith("step")]
        for i, name in enumerate(steps):
            ax.hist(report.groups[name], bins=report.bin_edges, alpha=0.45,
                    color=cmap(i / max(1, len(steps) - 1)),
                    label=f"step {name[4:]} (mean {report.means[name]:.3g})")
        ax.hist(report.groups["real"], bins=report.bin_edges, histtype="step", lw=1.6,
                color="crimson", label=f"real (mean {report.means['real']:.3g})")
        ax.set_xlabel("energy")
        ax.set_ylabel("images")
        ax.set_title(title)
        ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def loss_curve_figure(steps: Sequence[int], losses: Sequence[float], alphas: Sequence[float],
                      path: str | Path) -> Path:
    """Training loss (left axis, log scale) and step size (right axis) per optimizer step."""
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot(steps, losses, lw=0.8, color="tab:blue")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss", color="tab:blue")
        ax2 = ax.twinx()
        ax2.spines["right"].set_visible(True)
        ax2.plot(steps, alphas, lw=0.8, color="tab:orange")
        ax2.set_ylabel("alpha", color="tab:orange")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def triplet_image(corrupted01: torch.Tensor, original01: torch.Tensor, restored01: torch.Tensor,
                  scale: int = 4, gap: int = 2) -> np.ndarray:
    """One image's corrupted | original | restored panels side by side, upscaled."""
    panels = [_to_uint8(t) for t in (corrupted01, original01, restored01)]
    panels = [p.repeat(scale, axis=0).repeat(scale, axis=1) for p in panels]
    h = panels[0].shape[0]
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    return np.concatenate([panels[0], sep, panels[1], sep, panels[2]], axis=1)


def save_triplets(corrupted01, original01, restored01, out_dir: str | Path,
                  prefix: str = "restore", scale: int = 4) -> list[Path]:
    """Write one PNG triplet per image plus a stacked grid of all of them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths, rows = [], []
    for i in range(len(original01)):
        img = triplet_image(corrupted01[i], original01[i], restored01[i], scale)
        p = out_dir / f"{prefix}_{i:03d}.png"
        write_png(p, img)
        paths.append(p)
        rows.append(img)
    if rows:
        sep = np.full((2, rows[0].shape[1], 3), 255, dtype=np.uint8)
        grid = np.concatenate([r for row in rows for r in (row, sep)][:-1], axis=0)
        p = out_dir / f"{prefix}_grid.png"
        write_png(p, grid)
        paths.append(p)
    return paths


def restore_figure(corrupted01, original01, restored01, path: str | Path,
                   kinds: Sequence[str] | None = None) -> Path:
    """Labelled Corrupted / Original / Restored columns, one row per image."""
    path = Path(path)
    n = len(original01)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(n, 3, figsize=(3.6, 1.2 * n + 0.3), squeeze=False)
        for i in range(n):
            for j, (t, name) in enumerate(((corrupted01, "Corrupted"), (original01, "Original"),
                                           (restored01, "Restored"))):
                ax = axes[i, j]
                ax.imshow(_to_uint8(t[i]), interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0:
                    ax.set_title(name, fontsize=8)
            if kinds is not None:
                axes[i, 0].set_ylabel(kinds[i], fontsize=6)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
