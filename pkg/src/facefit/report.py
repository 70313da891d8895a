"""Render fitting-trace figures to files next to the CSV output."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .fitting import LOSS_TERMS


def save_trace_figure(trace, path):
    """Loss curves (total + per-term) and the step-size schedule, as one PNG."""
    records = trace.records
    fig, (ax_loss, ax_aux) = plt.subplots(1, 2, figsize=(10, 4))
    if records:
        iters = np.array([r.iteration for r in records])
        ax_loss.plot(iters, [r.total for r in records], label="total", color="black", lw=1.8)
        for term in LOSS_TERMS:
            values = np.array([r.terms.get(term, 0.0) for r in records])
            if np.any(values > 0):
                ax_loss.plot(iters, values, label=term, lw=1.0)
        ax_loss.set_yscale("log")
        ax_aux.plot(iters, [r.gradient_norm for r in records], label="gradient norm", lw=1.0)
        ax_aux.plot(iters, [r.learning_rate for r in records], label="learning rate", lw=1.0)
        ax_aux.set_yscale("log")
        ax_loss.legend(fontsize=8, loc="upper right")
        ax_aux.legend(fontsize=8, loc="upper right")
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss (unweighted terms)")
    ax_aux.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_render_comparison(target, rendered, path):
    """Side-by-side target vs render, for quick visual inspection."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.6))
    for ax, img, title in zip(axes, (target, rendered), ("target", "render")):
        ax.imshow(np.clip(img, 0.0, 1.0))
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
