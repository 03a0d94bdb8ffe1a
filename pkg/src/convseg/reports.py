"""Figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata would otherwise embed the matplotlib version.
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}

_STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width: float = 6.0):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    return plt.subplots(figsize=(width, width * golden))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_schedule(epochs: Sequence[int], lrs: Sequence[float], path, label: str = "") -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = _figure()
        ax.plot(epochs, lrs, lw=1.5, color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("learning rate")
        if label:
            ax.set_title(label)
        ax.set_ylim(bottom=0)
        return _save(fig, path)


def plot_history(history, path, title: str = "") -> Path:
    epochs = [r.epoch for r in history.records]
    with plt.rc_context(_STYLE):
        fig, ax = _figure()
        ax.plot(epochs, history.losses, color="C0", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean cross-entropy")
        ax.set_yscale("log")
        acc = ax.twinx()
        acc.plot(epochs, [r.accuracy for r in history.records], color="C1", label="train accuracy")
        acc.set_ylabel("point accuracy")
        acc.set_ylim(0, 1.02)
        acc.spines["right"].set_visible(True)
        lines = ax.get_lines() + acc.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right", frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_confusion(confusion: np.ndarray, path, class_names: Sequence[str] | None = None,
                   title: str = "") -> Path:
    confusion = np.asarray(confusion)
    n = confusion.shape[0]
    names = list(class_names) if class_names else [str(i) for i in range(n)]
    rows = confusion.sum(axis=1, keepdims=True)
    frac = np.divide(confusion, rows, out=np.zeros(confusion.shape), where=rows > 0)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.7 * n, 1.0 + 0.7 * n))
        ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
        for i in range(n):
            for j in range(n):
                ax.text(j, i, str(confusion[i, j]), ha="center", va="center",
                        color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
        ax.set_xticks(range(n), names, rotation=45, ha="right")
        ax.set_yticks(range(n), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("ground truth")
        if title:
            ax.set_title(title)
        return _save(fig, path)
