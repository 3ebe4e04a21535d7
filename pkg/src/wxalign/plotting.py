"""Figures for the report command. Everything renders off-screen to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS = ("precision", "recall", "map50", "f1")
# fixed PNG metadata keeps re-runs byte-identical
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return str(path)


def plot_levels(series, path, reference=None):
    """One panel per metric, metric against beta, one line per model.

    ``series`` maps a label to a list of level rows (dicts with ``beta`` and
    the metric keys). ``reference`` is drawn dashed when given.
    """
    fig, axes = plt.subplots(1, len(METRICS), figsize=(13, 3.2), sharex=True)
    for ax, metric in zip(axes, METRICS):
        for label, rows in series.items():
            ax.plot([r["beta"] for r in rows], [r[metric] for r in rows], marker="o", ms=3, label=label)
        if reference:
            ax.plot(
                [r["beta"] for r in reference],
                [r[metric] for r in reference],
                ls="--",
                color="0.5",
                label="full-scale reference",
            )
        ax.set_title(metric)
        ax.set_xlabel("beta")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    return _save(fig, path)


def plot_comparison(rows, path, keys=("clean", "degraded")):
    """Grouped bars of mAP@50 per model on each evaluation set."""
    labels = [r["label"] for r in rows]
    x = np.arange(len(labels))
    width = 0.8 / len(keys)
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(labels), 3.2))
    for k, key in enumerate(keys):
        values = [r[key] for r in rows]
        bars = ax.bar(x + (k - (len(keys) - 1) / 2) * width, values, width, label=key)
        for b, v in zip(bars, values):
            ax.annotate(f"{v:.3f}", (b.get_x() + b.get_width() / 2, v), ha="center", va="bottom", fontsize=7)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("mAP@50")
    ax.set_ylim(0, 1.1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_losses(traces, path):
    """Per-step loss traces, e.g. stage-B runs at different lambda."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, losses in traces.items():
        ax.plot(np.arange(len(losses)), losses, lw=0.8, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_gallery(images, path, titles=None, cols=4):
    """Grid of float RGB rasters in [0, 1]."""
    n = len(images)
    rows = max(1, -(-n // cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2 * rows), squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(images[i], 0, 1), interpolation="nearest")
            if titles:
                ax.set_title(titles[i], fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
