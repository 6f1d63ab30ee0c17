"""Figures written next to the CLI's JSON output (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_timing(ns: Sequence[int], seconds: Sequence[float], path) -> Path:
    """Median inference time per input against the number of digits."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(ns, [s * 1e3 for s in seconds], marker="o")
    ax.set_xlabel("digits per number N")
    ax.set_ylabel("median inference time (ms)")
    ax.set_xticks(list(ns))
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training(records: Sequence[dict], path) -> Path:
    """Accuracies (left) and inference losses (right) per epoch."""
    epochs = [r["epoch"] for r in records]
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.2))
    for key, label in (("acc_symbolic", "symbolic"), ("acc_neural", "neural"), ("acc_digit", "digit")):
        values = [r.get(key) for r in records]
        if any(v is not None for v in values):
            left.plot(epochs, [float("nan") if v is None else v for v in values], label=label)
    left.set_xlabel("epoch")
    left.set_ylabel("test accuracy")
    left.set_ylim(0.0, 1.02)
    left.legend(frameon=False)
    for key, label in (("loss_pred", "prediction"), ("loss_joint", "joint matching")):
        values = [r.get(key) for r in records]
        if any(v is not None for v in values):
            right.plot(epochs, [float("nan") if v is None else v for v in values], label=label)
    right.set_xlabel("epoch")
    right.set_ylabel("training loss")
    right.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
