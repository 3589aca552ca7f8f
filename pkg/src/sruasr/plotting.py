"""Figures written next to the CLI's CSV outputs (PNG, headless backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import NullFormatter, ScalarFormatter  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no Software tag, so the PNG bytes do not depend on the matplotlib version
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_curve(curve, path, baseline: float | None = None) -> Path:
    """Dev perplexity (log scale) and mean train loss against step."""
    steps = [row.step for row in curve]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        ax1.plot(steps, [row.dev_ppl for row in curve], marker="o", ms=3, label="SRU LM")
        if baseline is not None:
            ax1.axhline(baseline, color="0.4", ls="--", lw=1, label="add-1 bigram")
        ax1.set_yscale("log")
        ax1.yaxis.set_major_formatter(ScalarFormatter())
        ax1.yaxis.set_minor_formatter(NullFormatter())
        ax1.set_xlabel("step")
        ax1.set_ylabel("dev perplexity")
        ax1.legend(frameon=False)
        ax2.plot(steps, [row.train_loss for row in curve], marker="o", ms=3, color="C1")
        ax2.set_xlabel("step")
        ax2.set_ylabel("train loss (nats/token)")
        return _save(fig, path)


def plot_stages(stages: dict[str, float], order: Sequence[str], path) -> Path:
    labels = {"incoming": "incoming", "am_only": "AM only", "lm_fused": "+ LM fusion", "mbr": "+ expected WER"}
    names = [n for n in order if n in stages]
    values = [100.0 * stages[n] for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        bars = ax.bar([labels.get(n, n) for n in names], values, color=[f"C{i}" for i in range(len(names))])
        for bar, v in zip(bars, values):
            ax.annotate(f"{v:.2f}", (bar.get_x() + bar.get_width() / 2, v), ha="center", va="bottom", fontsize=8)
        ax.set_ylabel("WER (%)")
        ax.grid(axis="x", visible=False)
        return _save(fig, path)


def plot_grid(table, path) -> Path:
    """Heatmap of dev WER over (beta, gamma), minimized over alpha per cell."""
    betas = sorted({lam.beta for lam, _, _ in table})
    gammas = sorted({lam.gamma for lam, _, _ in table})
    grid = np.full((len(betas), len(gammas)), np.inf)
    for lam, edits, words in table:
        i, j = betas.index(lam.beta), gammas.index(lam.gamma)
        grid[i, j] = min(grid[i, j], 100.0 * edits / max(words, 1))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.6))
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis_r")
        ax.set_xticks(range(len(gammas)), [f"{g:g}" for g in gammas], rotation=90)
        ax.set_yticks(range(len(betas)), [f"{b:g}" for b in betas])
        ax.set_xlabel("gamma (BPE weight)")
        ax.set_ylabel("beta (SRU weight)")
        ax.grid(False)
        fig.colorbar(im, ax=ax, label="best dev WER over alpha (%)")
        return _save(fig, path)
