"""Figures for training runs and evaluations (matplotlib, file output only)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import BleuReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_length_buckets(buckets: Mapping[str, BleuReport], path, title: str = "BLEU by source length") -> Path:
    labels = list(buckets)
    scores = [buckets[k].bleu for k in labels]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(range(len(labels)), scores, color="#4c72b0")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlabel("source length")
    ax.set_ylabel("BLEU")
    ax.set_title(title)
    for i, s in enumerate(scores):
        ax.text(i, s, f"{s:.1f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_training_curves(log: Sequence[Mapping], path, title: str = "training") -> Path:
    """Train loss and dev perplexity per epoch, with the learning rate on a log axis."""
    epochs = [e["epoch"] for e in log]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    axes[0].plot(epochs, [e["train_loss"] for e in log], marker="o", ms=3)
    axes[0].set_ylabel("train loss")
    ppl = [e["dev_ppl"] for e in log]
    if any(p is not None for p in ppl):
        axes[1].plot(epochs, [float("nan") if p is None else p for p in ppl], marker="o", ms=3, color="C1")
    axes[1].set_ylabel("dev perplexity")
    axes[2].semilogy(epochs, [e["lr"] for e in log], drawstyle="steps-post", color="C2")
    axes[2].set_ylabel("learning rate")
    for ax in axes:
        ax.set_xlabel("epoch")
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_system_scores(scores: Mapping[str, Sequence[float]], path, title: str = "test BLEU") -> Path:
    """Mean and per-seed BLEU for each system."""
    names = list(scores)
    fig, ax = plt.subplots(figsize=(1.4 * len(names) + 2, 3.2))
    for i, n in enumerate(names):
        vals = list(scores[n])
        ax.bar(i, sum(vals) / len(vals), color="#dddddd", edgecolor="black")
        ax.plot([i] * len(vals), vals, "o", color="black", ms=4)
    ax.set_xticks(range(len(names)), names, rotation=15)
    ax.set_ylabel("BLEU")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_finetune_gap(sizes: Sequence[int], tuned: Sequence[float], scratch: Sequence[float], path,
                      base: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(sizes, tuned, marker="o", label="fine-tuned")
    ax.plot(sizes, scratch, marker="s", label="from scratch")
    if base is not None:
        ax.axhline(base, ls="--", color="gray", label="before fine-tuning")
    ax.set_xlabel("parallel pairs")
    ax.set_ylabel("BLEU")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
