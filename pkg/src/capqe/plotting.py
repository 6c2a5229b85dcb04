"""Figure rendering for reports. Output format follows the file extension (svg, png, pdf)."""

from __future__ import annotations

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .errors import TooFewPoints
from .metrics import auc

_COLORS = ("black", "tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple")


def _new_figure(width=6.0, height=None):
    golden = (np.sqrt(5) - 1.0) / 2.0
    fig = Figure(figsize=(width, height or width * golden))
    return fig, fig.add_subplot(1, 1, 1)


def plot_pr_curves(curves: dict, path, title: str | None = None) -> None:
    """One precision-recall line per model; the legend carries each curve's AUC."""
    fig, ax = _new_figure()
    for color, (name, points) in zip(_COLORS * 4, curves.items()):
        pts = sorted((p for p in points if p.precision is not None), key=lambda p: p.recall)
        try:
            label = f"{name} (AUC={auc(points):.3f})"
        except TooFewPoints:
            label = name
        ax.plot([p.recall for p in pts], [p.precision for p in pts], color=color, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize="small")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_history(history, path) -> None:
    fig, ax = _new_figure()
    steps = [r.step for r in history.records]
    rho = [np.nan if r.dev_spearman is None else r.dev_spearman for r in history.records]
    ax.plot(steps, rho, marker="o", ms=3, color="black", label="dev Spearman")
    ax.axvline(history.best_step, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("dev Spearman")
    ax2 = ax.twinx()
    loss = [np.nan if r.train_loss is None else r.train_loss for r in history.records]
    ax2.plot(steps, loss, color="tab:blue", lw=1, label="train MSE")
    ax2.set_ylabel("train MSE", color="tab:blue")
    fig.tight_layout()
    _save(fig, path)


def plot_score_differences(diffs, path) -> None:
    """Histogram of paired score differences on the 1/8 grid."""
    fig, ax = _new_figure()
    edges = np.arange(-1.0 - 1 / 16, 1.0 + 1 / 8, 1 / 8)
    ax.hist(np.asarray(diffs), bins=edges, color="grey", edgecolor="black")
    ax.axvspan(-0.25, 0.25, color="tab:green", alpha=0.1)
    ax.set_xlabel("score difference")
    ax.set_ylabel("pairs")
    fig.tight_layout()
    _save(fig, path)


def _save(fig, path):
    with matplotlib.rc_context({"svg.hashsalt": "capqe"}):
        fig.savefig(path, metadata=_stable_metadata(path))


def _stable_metadata(path):
    # drop timestamps so reruns produce identical files
    ext = str(path).rsplit(".", 1)[-1].lower()
    if ext == "svg":
        return {"Date": None}
    if ext == "pdf":
        return {"CreationDate": None, "ModDate": None}
    return None
