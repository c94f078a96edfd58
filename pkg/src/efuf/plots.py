"""Figure rendering for the report-producing stages.

Every report path writes its delimited data first and then renders a
matplotlib figure next to it; figures are byproducts, the delimited files
stay the artifacts of record.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _save(fig, path: Path | str, provenance: str | None) -> None:
    metadata = {"Description": provenance} if provenance else None
    fig.savefig(path, dpi=120, metadata=metadata)
    plt.close(fig)


def save_density_figure(
    path: Path | str,
    groups: dict[str, Sequence[float]],
    bins: int = 20,
    title: str = "image-relevance score density",
    xlabel: str = "score",
    provenance: str | None = None,
) -> None:
    """Overlaid density histograms, one per labeled score group."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, scores in groups.items():
        ax.hist(scores, bins=bins, density=True, histtype="stepfilled", alpha=0.45, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, path, provenance)


def save_loss_curves(path: Path | str, reports: Sequence, provenance: str | None = None) -> None:
    """Per-step loss components from a training run."""
    steps = [r.step for r in reports]
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    ax.plot(steps, [r.l_pos for r in reports], label="positive")
    ax.plot(steps, [r.l_neg for r in reports], label="negative")
    ax.plot(steps, [r.l_sent for r in reports], label="sentence")
    ax.plot(steps, [r.l_total for r in reports], label="total", linewidth=2, color="black")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss components")
    ax.legend()
    fig.tight_layout()
    _save(fig, path, provenance)


def save_metric_bars(path: Path | str, named_reports: dict[str, dict], provenance: str | None = None) -> None:
    """Side-by-side metric bars for one or two eval reports (e.g. baseline vs tuned)."""
    metrics = ["chair_s", "chair_i", "bleu1", "bleu2", "bleu4"]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    width = 0.8 / max(len(named_reports), 1)
    for i, (name, report) in enumerate(named_reports.items()):
        xs = [j + i * width for j in range(len(metrics))]
        ax.bar(xs, [report[m] for m in metrics], width=width, label=name)
    ax.set_xticks([j + width * (len(named_reports) - 1) / 2 for j in range(len(metrics))])
    ax.set_xticklabels(metrics)
    ax.set_ylabel("value")
    ax.set_title("hallucination and quality metrics")
    ax.legend()
    fig.tight_layout()
    _save(fig, path, provenance)
