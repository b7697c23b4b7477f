"""Matplotlib figures rendered next to the delimited report files.

Every report path (training loss log, evaluation table, ablation table)
writes a PNG with the same stem. Rendering is deterministic: fixed dpi,
fixed metadata, Agg backend.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = dict(dpi=110, metadata={"Software": "octgen"})


def loss_curve(loss_rows, path) -> None:
    """Per-phase training loss on a log scale."""
    fig, ax = plt.subplots(figsize=(7, 4))
    phases = []
    for name in ("latent", "scale1", "scale2"):
        rows = [(s, l) for p, s, l in loss_rows if p == name]
        if rows:
            phases.append(name)
            steps, losses = zip(*rows)
            ax.plot(steps, losses, label=name, linewidth=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    if phases:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def eval_report(sample_ids, nearest_dists, floor, path) -> None:
    """Nearest-corpus Chamfer per sample with the sampling-noise floor."""
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(sample_ids))
    ax.bar(x, nearest_dists, color="#4878a8")
    if floor is not None:
        ax.axhline(floor, color="#b04a4a", linestyle="--", linewidth=1.0, label="sampling floor")
        ax.axhline(5 * floor, color="#b04a4a", linestyle=":", linewidth=1.0, label="5x floor")
        ax.legend()
    ax.set_xticks(x)
    ax.set_xticklabels(sample_ids, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("nearest-corpus Chamfer")
    ax.set_title("evaluation")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def ablation(labels, values, path) -> None:
    """Mean nearest-corpus Chamfer per conditioning configuration."""
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(labels))
    ax.bar(x, values, color="#5a8f5a")
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("mean nearest-corpus Chamfer")
    ax.set_title("per-scale conditioning ablation")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
