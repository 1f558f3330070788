"""Report figures written straight to PNG files (Agg backend, no display).

Figures carry no timestamp metadata, so reruns produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imaging import Image  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "savefig.dpi": 120,
}
_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_METADATA, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curves(series: dict[str, Sequence[tuple[int, float]]], path, title: str = "",
                ylabel: str = "fusion loss", marks: Sequence[int] = ()) -> Path:
    """One line per named series of ``(step, value)`` points; ``marks`` draws
    vertical lines (e.g. a stage switch)."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for name, pts in series.items():
            if pts:
                x, y = zip(*pts)
                ax.plot(x, y, label=name)
        for m in marks:
            ax.axvline(m, color="0.5", linestyle="--", linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def image_grid(images: Sequence[Image], titles: Sequence[str], path, ncols: int | None = None) -> Path:
    """Gray images side by side on a shared [0, 1] scale."""
    n = len(images)
    ncols = ncols or n
    nrows = -(-n // ncols)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.9 * ncols, 2.1 * nrows), squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for ax, img, title in zip(axes.flat, images, titles):
            ax.imshow(img.to_range("unit").gray, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
            ax.set_title(title, fontsize=8)
        return _save(fig, path)


def metric_bars(aggregates: dict[str, dict[str, float]], path, metrics: Sequence[str] | None = None) -> Path:
    """Grouped bars: one panel per metric, one bar per method."""
    methods = list(aggregates)
    metrics = list(metrics or next(iter(aggregates.values())).keys())
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(1.8 * len(metrics), 2.6), squeeze=False)
        for ax, m in zip(axes[0], metrics):
            vals = [aggregates[k][m] for k in methods]
            ax.bar(np.arange(len(methods)), vals, color=[f"C{j}" for j in range(len(methods))])
            ax.set_xticks(np.arange(len(methods)), methods, rotation=45, ha="right")
            ax.set_title(m)
        return _save(fig, path)
