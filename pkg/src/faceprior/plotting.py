"""Matplotlib figures written next to the CSV/JSON outputs of the CLI."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def gate_figure(per_token: dict[str, np.ndarray], path, cmap: str = "viridis") -> Path:
    """One panel per named token-grid map (e.g. combined gate, |diff| energy)."""
    with plt.rc_context(STYLE):
        n = len(per_token)
        fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.4), squeeze=False)
        for ax, (title, grid) in zip(axes[0], per_token.items()):
            im = ax.imshow(grid, cmap=cmap, interpolation="nearest")
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def loss_curves(metrics: list[dict], path, keys=("total", "rec", "per", "id", "gan")) -> Path:
    steps = [m["step"] for m in metrics]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for k in keys:
            if metrics and k in metrics[0]:
                ax.plot(steps, [m[k] for m in metrics], label=k, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def metric_bars(rows: list[dict], path, metric: str = "psnr", label: str = "variant") -> Path:
    names = [str(r[label]) for r in rows]
    vals = [r[metric] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3, 1.1 * len(rows)), 3))
        ax.bar(names, vals, color="0.35")
        lo = min(vals) if vals else 0
        ax.set_ylim(lo - 1.0 if metric == "psnr" else 0, None)
        ax.set_ylabel(metric.upper())
        return _save(fig, path)


def psnr_histogram(values: list[float], path, reference: list[float] | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        bins = max(5, int(np.sqrt(len(values))))
        ax.hist(values, bins=bins, alpha=0.7, label="pred vs GT")
        if reference:
            ax.hist(reference, bins=bins, alpha=0.5, label="reference")
            ax.legend(frameon=False)
        ax.set_xlabel("PSNR (dB)")
        ax.set_ylabel("images")
        return _save(fig, path)
