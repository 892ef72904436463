"""Figures written next to the CSV outputs of a run."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.linewidth": 0.6,
    "legend.frameon": False,
}


def loss_curve(history, path) -> None:
    """Training/validation objective per epoch on a log axis."""
    if not history:
        return
    epochs, train, val = (np.array(c, dtype=float) for c in zip(*history))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, np.maximum(train, 1e-300), label="train")
        ax.plot(epochs, np.maximum(val, 1e-300), label="validation", linestyle="--")
        if np.all(train > 0) and np.all(val > 0):
            ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("self-supervised loss")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)


def prediction_scatter(y_true, y_pred, path, title: str | None = None) -> None:
    """Predicted against true arrival time (seconds) with the identity line."""
    y_true, y_pred = np.asarray(y_true, float), np.asarray(y_pred, float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        ax.scatter(y_true, y_pred, s=6, alpha=0.6, linewidths=0)
        if len(y_true):
            lo = float(min(y_true.min(), y_pred.min()))
            hi = float(max(y_true.max(), y_pred.max()))
            ax.plot([lo, hi], [lo, hi], color="k", linewidth=0.6)
        ax.set_xlabel("true arrival time (s)")
        ax.set_ylabel("predicted (s)")
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)


def ablation_bars(summary: dict[str, tuple[float, float]], path) -> None:
    """Mean test MAE per variant with one-standard-deviation whiskers."""
    names = list(summary)
    means = [summary[k][0] for k in names]
    stds = [summary[k][1] for k in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(names, means, yerr=stds, capsize=3, color="0.6", edgecolor="0.2", linewidth=0.5)
        ax.set_ylabel("test MAE (normalized)")
        fig.savefig(path)
        plt.close(fig)


def degree_histogram(degrees, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(np.asarray(degrees, float), bins=30, color="0.5")
        ax.set_xlabel("weighted degree")
        ax.set_ylabel("trajectories")
        fig.savefig(path)
        plt.close(fig)
