"""Matplotlib figures written next to the tabular reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed metadata keeps PNG output byte-identical across runs.
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_roc(curves: dict, path: str | Path, title: str = "ROC") -> None:
    """``curves`` maps a legend label to ``(RocCurve, auc)``."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="0.6")
    for label, (curve, auc) in curves.items():
        ax.step(curve.fpr, curve.tpr, where="post", lw=1.5, label=f"{label} (AUC {auc:.4f})")
    ax.set_xlim(-0.01, 1.01)
    ax.set_ylim(-0.01, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_trace(trace, path: str | Path, title: str = "Training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r.epoch for r in trace], [r.loss for r in trace], marker="o", ms=3)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Weighted cross-entropy")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
