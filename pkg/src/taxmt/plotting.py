"""Report figures, rendered off-screen to PNG.

``description`` is stored in the PNG text chunk; the CLI puts the run's
provenance line there.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Drop the version string from the PNG text chunk so files are stable across installs.
_PNG_META = {"Software": None}


def _save(fig, path: str | Path, description: str | None = None) -> Path:
    path = Path(path)
    fig.tight_layout()
    meta = dict(_PNG_META, **({"Description": description} if description else {}))
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)
    return path


def plot_class_distribution(class_sizes: Sequence[int], path: str | Path, title: str = "products per leaf class",
                            description: str | None = None):
    """Rank-ordered leaf sizes on a log scale: the long tail is visible at a glance."""
    sizes = sorted(class_sizes, reverse=True)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(1, len(sizes) + 1), sizes, width=1.0, color="#4c72b0")
    ax.set_yscale("log")
    ax.set_xlabel("class rank")
    ax.set_ylabel("products")
    ax.set_title(title)
    return _save(fig, path, description)


def plot_training_curves(histories: Mapping[str, Sequence[Mapping]], path: str | Path, description: str | None = None):
    """Per-token train and validation loss per epoch, one colour per model."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for (name, epochs), c in zip(sorted(histories.items()), colors):
        x = [e["epoch"] for e in epochs]
        ax.plot(x, [e["train_loss"] for e in epochs], color=c, ls="--", label=f"{name} train")
        ax.plot(x, [e["val_loss"] for e in epochs], color=c, label=f"{name} validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy per token")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path, description)


def plot_sweep(columns: Sequence[str], rows: Mapping[str, Mapping[str, float]], path: str | Path,
               description: str | None = None):
    """Weighted F against the training share of each split."""
    train_share = [int(c.split("-")[0]) for c in columns]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, cells in sorted(rows.items()):
        ax.plot(train_share, [100 * cells[c] for c in columns], marker="o", label=name)
    ax.set_xticks(train_share, columns)
    ax.set_xlabel("train-validation-test split (%)")
    ax.set_ylabel("weighted F")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path, description)
