"""Report figures: accuracy by chain length and the training loss curve."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _figure(width: float = 6.0):
    fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # a fixed metadata dict keeps repeated renders byte-identical
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_accuracy_by_k(
    per_k: Mapping[int, float],
    path,
    others: Mapping[str, Mapping[int, float]] | None = None,
    title: str = "Accuracy by chain length",
) -> Path:
    fig, ax = _figure()
    series = {"model": per_k, **(others or {})}
    for label, values in series.items():
        vals = {int(k): v for k, v in values.items()}  # JSON round trips stringify keys
        ks = sorted(vals)
        ax.plot(ks, [100.0 * vals[k] for k in ks], marker="o", label=label)
    ax.set_xlabel("chain length k")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 102)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_loss(batch_losses: Sequence[float], path, epoch_metrics: Sequence[dict] = ()) -> Path:
    fig, ax = _figure()
    ax.plot(range(1, len(batch_losses) + 1), batch_losses, lw=0.6, alpha=0.6, label="batch")
    if epoch_metrics and batch_losses:
        per_epoch = len(batch_losses) / len(epoch_metrics)
        xs = [per_epoch * m["epoch"] for m in epoch_metrics]
        ax.plot(xs, [m["loss"] for m in epoch_metrics], marker="o", label="epoch mean")
        ax.legend(frameon=False)
    ax.set_xlabel("batch")
    ax.set_ylabel("loss")
    ax.set_title("Training loss")
    return _save(fig, path)
