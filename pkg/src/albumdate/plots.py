"""Figures for run reports. Everything renders off-screen with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ABLATION_VARIANTS, AblationTable, variant_name  # noqa: E402

# PNG metadata without a timestamp, so identical figures give identical files.
_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def confusion_heatmap(matrix: np.ndarray, class_names: Sequence[str], path: str | Path,
                      title: str = "", tick_every: int = 1) -> Path:
    """Row-normalized confusion matrix; rows are true classes."""
    m = np.asarray(matrix, dtype=np.float64)
    rows = m.sum(axis=1, keepdims=True)
    norm = np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)
    size = min(12, 3 + 0.12 * len(class_names))
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(norm, cmap="viridis", vmin=0, vmax=1)
    ticks = np.arange(0, len(class_names), tick_every)
    ax.set_xticks(ticks, [class_names[i] for i in ticks], rotation=90, fontsize=7)
    ax.set_yticks(ticks, [class_names[i] for i in ticks], fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _finish(fig, path)


def decade_curve(per_decade: Mapping[int, tuple[float, int]], path: str | Path, title: str = "") -> Path:
    """Accuracy (red) and sample count (blue) for each decade."""
    decades = sorted(per_decade)
    acc = [per_decade[d][0] for d in decades]
    count = [per_decade[d][1] for d in decades]
    labels = [f"{d}s" for d in decades]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(labels, acc, "o-", color="tab:red", label="accuracy")
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy (d=0)", color="tab:red")
    twin = ax.twinx()
    twin.plot(labels, count, "s-", color="tab:blue", label="samples")
    twin.set_ylabel("samples", color="tab:blue")
    ax.set_title(title)
    return _finish(fig, path)


def ablation_chart(table: AblationTable, path: str | Path, title: str = "") -> Path:
    ks = sorted(table.rows)
    fig, ax = plt.subplots(figsize=(7, 4))
    for kind, with_image in ABLATION_VARIANTS:
        name = variant_name(kind, with_image)
        ax.plot(ks, [table.rows[k][name] for k in ks], "o-" if with_image else "o--", label=name)
    ax.set_xlabel(f"crops used (k of n={table.n})")
    ax.set_ylabel("accuracy (d=0)")
    ax.set_xticks(ks)
    ax.legend(fontsize=7)
    ax.set_title(title)
    return _finish(fig, path)


def probability_histogram(probs: Sequence[float], class_names: Sequence[str], path: str | Path,
                          true_class: int | None = None, top: int = 10) -> Path:
    """Bar chart of the ``top`` most probable classes; the true class is highlighted."""
    p = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-p, kind="stable")[:top]
    colors = ["tab:green" if i == true_class else "tab:gray" for i in order]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(range(len(order)), p[order], color=colors)
    ax.set_xticks(range(len(order)), [class_names[i] for i in order], rotation=60, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("probability")
    return _finish(fig, path)
