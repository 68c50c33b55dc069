"""Matplotlib renderers for the report artifacts (saved next to the CSVs)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import ConfidenceHistogram


def save_histogram_png(hist: ConfidenceHistogram, path: str | Path) -> None:
    """Grouped bars of prediction confidence, correct vs incorrect."""
    edges = hist.edges
    centers = [(edges[i] + edges[i + 1]) / 2 for i in range(len(edges) - 1)]
    width = (edges[1] - edges[0]) * 0.42
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([c - width / 2 for c in centers], hist.correct_counts, width=width,
           label="correct", color="tab:blue")
    ax.bar([c + width / 2 for c in centers], hist.incorrect_counts, width=width,
           label="incorrect", color="tab:red")
    ax.set_xlabel("prediction confidence")
    ax.set_ylabel("questions")
    ax.set_title("Prediction confidence by correctness")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_png(pairs: Sequence[tuple[int, float]], path: str | Path) -> None:
    """Accuracy versus facts-per-input line plot."""
    counts = [k for k, _ in pairs]
    accs = [100 * a for _, a in pairs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(counts, accs, marker="o")
    ax.set_xlabel("facts per input")
    ax.set_ylabel("accuracy (%)")
    ax.set_title("Impact of retrieved knowledge on accuracy")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ablation_png(names: Sequence[str], accuracies: Sequence[float],
                      path: str | Path) -> None:
    """Horizontal bars, one per ablation leg."""
    fig, ax = plt.subplots(figsize=(7, 0.45 * max(4, len(names)) + 1))
    ypos = range(len(names))
    ax.barh(list(ypos), [100 * a for a in accuracies], color="tab:green")
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlabel("accuracy (%)")
    ax.set_title("Ablation legs")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
