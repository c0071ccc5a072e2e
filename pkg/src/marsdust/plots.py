"""PNG figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def loss_curves(series: Mapping[str, Sequence[float]], path: str | Path, xlabel: str = "epoch") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in series.items():
        if len(values):
            ax.plot(np.arange(1, len(values) + 1), values, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("loss")
    ax.legend()
    _save(fig, path)


def confusion_matrix(cm: np.ndarray, labels: Sequence[str], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(cm, cmap="Blues")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    _save(fig, path)


def histogram(counts: np.ndarray, smoothed: np.ndarray, peaks: Sequence[int], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    levels = np.arange(len(counts))
    ax.bar(levels, counts, width=1.0, alpha=0.4, label="counts")
    ax.plot(levels, smoothed, color="k", label="smoothed")
    for p in peaks:
        ax.axvline(p, color="r", ls="--")
    ax.set_xlabel("gray level")
    ax.legend()
    _save(fig, path)


def variance_ratio(ratios: Sequence[float], elbow: int, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(np.arange(1, len(ratios) + 1), ratios, marker="o")
    ax.axvline(elbow, color="r", ls="--")
    ax.set_xlabel("component")
    ax.set_ylabel("explained variance ratio")
    _save(fig, path)


def sweep(levels: Sequence[float], metrics: Mapping[str, Sequence[float]], path: str | Path) -> None:
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5))
    for ax, (name, values) in zip(np.atleast_1d(axes), metrics.items()):
        ax.plot(levels, values, marker="o")
        ax.set_xlabel("noise level")
        ax.set_title(name)
    _save(fig, path)
