"""Matplotlib figures written straight to files (no pyplot state)."""
from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

# fixed salt and no date stamp keep re-rendered SVGs byte-identical
RC = {
    "svg.hashsalt": "anatclip",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.linewidth": 0.8,
    "legend.fontsize": 5.5,
    "lines.linewidth": 1.0,
}
SVG_METADATA = {"Date": None, "Creator": "anatclip"}


def _figure(width: float = 5.0, height: float = 4.2) -> Figure:
    fig = Figure(figsize=(width, height))
    FigureCanvasSVG(fig)
    return fig


def plot_roc_curves(bank, path: str | Path) -> None:
    """One-vs-rest ROC polyline per class with its AUC in the legend."""
    with matplotlib.rc_context(RC):
        fig = _figure()
        ax = fig.add_subplot(1, 1, 1)
        cmap = matplotlib.colormaps["tab20"]
        for i, (label, pts) in enumerate(zip(bank.labels, bank.roc)):
            auc = bank.auc[i]
            tag = "n/a" if not np.isfinite(auc) else f"{auc:.2f}"
            ax.plot(pts[:, 0], pts[:, 1], color=cmap(i % 20), label=f"{label} (AUC = {tag})")
        ax.plot([0, 1], [0, 1], color="0.6", linestyle="--", linewidth=0.7)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.set_title(f"One-vs-rest ROC, {bank.kind} labels (macro AUC = {bank.macro_auc:.3f})")
        ax.legend(loc="lower right", ncol=2 if len(bank.labels) > 8 else 1, frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata=SVG_METADATA)


def plot_training_curves(rows: list[dict], path: str | Path) -> None:
    """Loss terms and validation accuracies against epoch."""
    with matplotlib.rc_context(RC):
        fig = _figure(6.0, 3.0)
        ax1, ax2 = fig.add_subplot(1, 2, 1), fig.add_subplot(1, 2, 2)
        epochs = [int(r["epoch"]) for r in rows]
        for key in ("total_loss", "vision_loss", "text_loss"):
            ax1.plot(epochs, [float(r[key]) for r in rows], marker="o", markersize=2, label=key)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(frameon=False)
        for key in ("val_organ_acc", "val_station_acc"):
            ax2.plot(epochs, [float(r[key]) for r in rows], marker="o", markersize=2, label=key)
        ax2.set_xlabel("epoch")
        ax2.set_ylim(0, 1)
        ax2.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
