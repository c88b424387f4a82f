"""Figure rendering for experiment reports.

All figures go straight to PNG files through the Agg backend; nothing here
opens a window.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..imaging import to_uint8  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # keep PNG bytes stable across runs
    "svg.hashsalt": "oneshot",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def image_grid(images, titles, path, ncols: int | None = None, panel_inches: float = 1.3) -> Path:
    """Lay (3, R, R) images out left to right (wrapping at ``ncols``)."""
    n = len(images)
    ncols = ncols or n
    nrows = (n + ncols - 1) // ncols
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=(panel_inches * ncols, panel_inches * nrows + 0.3),
                                 squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for i, img in enumerate(images):
            ax = axes.flat[i]
            ax.imshow(to_uint8(img), interpolation="nearest")
            if titles is not None:
                ax.set_title(titles[i])
        return _save(fig, path)


def embedding_scatter(points: np.ndarray, labels, path, title: str | None = None) -> Path:
    labels = np.asarray(labels)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.6))
        for name in sorted(set(labels.tolist())):
            m = labels == name
            ax.scatter(points[m, 0], points[m, 1], s=4, alpha=0.6, label=name)
        ax.legend(markerscale=3, frameon=False)
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        return _save(fig, path)


def loss_traces(traces: dict[str, list[float]], path, ylabel: str = "reconstruction distance") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for name, trace in traces.items():
            ax.plot(np.arange(len(trace)), trace, label=name, lw=1)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        return _save(fig, path)


def metric_bars(names, values, path, ylabel: str = "average precision", reference: dict | None = None) -> Path:
    """Bar chart of one metric per condition, optionally with reference values as markers."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(0.9 * len(names) + 1.5, 2.8))
        x = np.arange(len(names))
        ax.bar(x, values, color="#4c72b0", width=0.6)
        if reference:
            ref = [reference.get(n, np.nan) for n in names]
            ax.plot(x, ref, "k_", markersize=18, label="reference")
            ax.legend(frameon=False)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel(ylabel)
        return _save(fig, path)


def curve(xs, series: dict[str, list[float]], path, xlabel: str, ylabel: str = "average precision",
          logx: bool = True) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for name, ys in series.items():
            ax.plot(xs[: len(ys)], ys, marker="o", lw=1, label=name)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False)
        return _save(fig, path)
