"""Report figures (matplotlib, Agg backend, written straight to files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def training_curves(history, path):
    """Loss and held-out PSNR against step, with stage changes marked."""
    if not history:
        return None
    steps = [r["step"] for r in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.2))
    a1.plot(steps, [r["loss"] for r in history], marker=".")
    a1.set_xlabel("step")
    a1.set_ylabel("training loss")
    a1.set_yscale("log")
    a2.plot(steps, [r["psnr"] for r in history], marker=".", color="tab:green")
    a2.set_xlabel("step")
    a2.set_ylabel("held-out PSNR (dB)")
    prev = None
    for r in history:
        if prev is not None and r["stage"] != prev:
            for ax in (a1, a2):
                ax.axvline(r["step"], color="0.6", ls="--", lw=0.8)
        prev = r["stage"]
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def partition_scatter(partition, path, tau=None, gamma=None):
    """Offset variance vs. flow-consistency ratio, colored by label."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    var = np.maximum(np.asarray(partition.variance), 1e-8)
    dyn = np.asarray(partition.dynamic)
    ax.scatter(var[~dyn], np.asarray(partition.ratio)[~dyn], s=8, label="static", color="tab:blue")
    ax.scatter(var[dyn], np.asarray(partition.ratio)[dyn], s=8, label="dynamic", color="tab:red")
    if tau is not None:
        ax.axvline(tau, color="0.5", ls="--", lw=0.8)
    if gamma is not None:
        ax.axhline(gamma, color="0.5", ls="--", lw=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("offset variance")
    ax.set_ylabel("motion-flow ratio")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def eval_bars(names, psnrs, path):
    """Per-image PSNR bar chart."""
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(names) + 1), 3))
    ax.bar(range(len(names)), psnrs, color="tab:purple")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=70, fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def image_grid(images, path, titles=None, cols=4):
    n = len(images)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2 * rows), squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(images[i], 0, 1), interpolation="nearest")
            if titles:
                ax.set_title(titles[i], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
