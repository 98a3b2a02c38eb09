"""Figure rendering for pipeline runs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curves(traces: dict[str, list[dict]], path) -> None:
    """Training loss (and holdout BCE where present) per fold."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, rows in sorted(traces.items()):
        batches = [r["batch"] for r in rows]
        ax.plot(batches, [r["loss"] for r in rows], label=f"{name} train",
                linewidth=1.0)
        if rows and "holdout_bce" in rows[0]:
            ax.plot(batches, [r["holdout_bce"] for r in rows],
                    label=f"{name} holdout", linewidth=1.0, linestyle="--")
    ax.set_xlabel("batch")
    ax.set_ylabel("binary cross-entropy")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=110)
    plt.close(fig)


def save_surface_panel(panels: list[tuple[str, np.ndarray]], path,
                       ncols: int = 2) -> None:
    """Grayscale image grid (texture, prediction, labels, composite...)."""
    if not panels:
        raise ValueError("no panels to draw")
    n = len(panels)
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols,
                             figsize=(4.2 * ncols, 3.4 * nrows),
                             squeeze=False)
    for ax in axes.ravel():
        ax.set_axis_off()
    for ax, (title, img) in zip(axes.ravel(), panels):
        ax.imshow(np.asarray(img, dtype=np.float64), cmap="gray",
                  vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_axis_on()
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(Path(path), dpi=110)
    plt.close(fig)


def save_metric_bars(rows: list[dict], path) -> None:
    """Dice / recall / FPR per fold plus the pooled bar."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [str(r["fold"]) for r in rows]
    x = np.arange(len(names), dtype=float)
    width = 0.27
    for k, key in enumerate(("dice", "recall", "fpr")):
        vals = [r.get(key) if r.get(key) is not None else 0.0 for r in rows]
        ax.bar(x + (k - 1) * width, vals, width, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=110)
    plt.close(fig)
