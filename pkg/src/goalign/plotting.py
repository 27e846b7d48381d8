"""Matplotlib figures written next to the JSON/TSV outputs."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}
# Fixed metadata keeps the PNG bytes reproducible.
_META = {"Software": None}


def _save(fig, path: str | os.PathLike) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(p, metadata=_META)
    plt.close(fig)
    return p


def plot_losses(history: Sequence[dict], path: str | os.PathLike) -> Path:
    """Per-step loss components on one axis."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        steps = [r["step"] for r in history]
        for key, style in (("total", "-k"), ("global", "-"), ("local", "--"), ("tsl", ":")):
            vals = np.array([r.get(key, np.nan) for r in history], dtype=float)
            if np.isfinite(vals).any():
                ax.plot(steps, vals, style, lw=1.2, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def plot_recall(report, path: str | os.PathLike, baseline=None) -> Path:
    """Recall@K curves for both directions, optionally against a second report."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ks = report.ks
        ax.plot(ks, [report.t2i[k] for k in ks], "o-", label="T2I")
        ax.plot(ks, [report.i2t[k] for k in ks], "s-", label="I2T")
        if baseline is not None:
            ax.plot(ks, [baseline.t2i[k] for k in ks], "o--", color="0.5", label="T2I (baseline)")
            ax.plot(ks, [baseline.i2t[k] for k in ks], "s--", color="0.7", label="I2T (baseline)")
        ax.set_xscale("log")
        ax.set_xticks(ks)
        ax.set_xticklabels([str(k) for k in ks])
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("K")
        ax.set_ylabel("Recall@K")
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_heatmap(image: np.ndarray, artifact, path: str | os.PathLike) -> Path:
    """Input, PCA grid and overlay side by side."""
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.6))
        panels = (
            (image, "input"),
            (artifact.grid, "PCA of patch tokens"),
            (artifact.overlay, "overlay"),
        )
        for ax, (img, title) in zip(axes, panels):
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        e = artifact.energies
        fig.suptitle(f"component energy {e[0]:.2f} / {e[1]:.2f} / {e[2]:.2f}", fontsize=8)
        return _save(fig, path)
