"""Figure rendering for the CLI report path.

Kept separate from the evaluation module so the metric/export code stays
free of rendering dependencies. Everything draws through the Agg backend
and writes PNG files; nothing here opens a window.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_scatter(
    points: np.ndarray,
    labels: Sequence[int],
    out_path: str,
    flagged: Sequence[bool] | None = None,
    title: str = "comment embedding projection",
) -> None:
    """2-D scatter colored by label; flagged points drawn as crosses on top."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    fig, ax = plt.subplots(figsize=(7.0, 5.5), dpi=120)
    for lab, color, name in ((0, "#3a7bd5", "clean"), (1, "#d64541", "abusive")):
        mask = labels == lab
        ax.scatter(
            points[mask, 0], points[mask, 1],
            s=9, alpha=0.55, c=color, label=name, linewidths=0,
        )
    if flagged is not None:
        fmask = np.asarray(flagged, dtype=bool)
        if fmask.any():
            ax.scatter(
                points[fmask, 0], points[fmask, 1],
                s=28, marker="x", c="#222222", label="flipped", linewidths=1.0,
            )
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(title)
    ax.legend(loc="best", frameon=False)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def render_stage_f1(
    stages: Sequence[tuple[str, float]],
    out_path: str,
    title: str = "out-of-fold F1 by stage",
) -> None:
    """Bar chart of the F1 each pipeline stage reached."""
    names = [name for name, _ in stages]
    scores = [score for _, score in stages]
    fig, ax = plt.subplots(figsize=(7.0, 4.0), dpi=120)
    bars = ax.bar(range(len(names)), scores, color="#3a7bd5", width=0.6)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("F1")
    ax.set_title(title)
    for bar, score in zip(bars, scores):
        ax.text(
            bar.get_x() + bar.get_width() / 2, score + 0.01,
            f"{score:.3f}", ha="center", va="bottom", fontsize=8,
        )
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def render_loss_curves(
    curves: Sequence[tuple[str, Sequence[float]]],
    out_path: str,
    title: str = "training loss per boosting round",
) -> None:
    """Line plot of mean logistic loss across rounds for one or more models."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0), dpi=120)
    for name, curve in curves:
        ax.plot(range(len(curve)), curve, label=name, linewidth=1.2)
    ax.set_xlabel("round")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend(loc="best", frameon=False)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
