"""Figure rendering for the report paths.

Every function writes a PNG next to the delimited output it illustrates
and returns the path it wrote.  Rendering is headless (Agg); nothing
here opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 120


def loss_curve_figure(losses, path, start_epoch: int = 0) -> str:
    """Per-epoch training loss; log scale when the trace allows it."""
    losses = np.asarray(losses, dtype=np.float64)
    epochs = np.arange(start_epoch, start_epoch + len(losses))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, lw=1.5, color="tab:blue")
    if len(losses) and np.all(losses > 0):
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean per-token NLL")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def metrics_figure(report_dict: dict, path) -> str:
    """Corpus metric bars plus the per-image CIDEr-D spread."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))

    names = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"]
    vals = [report_dict[n] for n in names]
    ax1.bar(names, vals, color="tab:blue")
    ax1.set_ylim(0, 1.05)
    ax1.set_ylabel("score")
    ax1.set_title("corpus metrics")
    for i, v in enumerate(vals):
        ax1.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    ax1.tick_params(axis="x", rotation=30)

    per_image = report_dict.get("per_image", [])
    ciders = [e["cider_d"] for e in per_image]
    if ciders:
        ax2.plot(range(len(ciders)), ciders, ".", ms=5, color="tab:orange",
                 label="per image")
    ax2.axhline(report_dict["cider_d"], color="tab:red", lw=1.2,
                label=f"corpus {report_dict['cider_d']:.3f}")
    ax2.set_ylim(0, 10.5)
    ax2.set_xlabel("image index")
    ax2.set_ylabel("CIDEr-D")
    ax2.set_title("CIDEr-D")
    ax2.legend(loc="lower right", fontsize=8)

    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def gradcheck_figure(rel_errors: dict, threshold: float, path) -> str:
    """Per-parameter relative error on a log axis against the pass line."""
    names = list(rel_errors.keys())
    vals = np.asarray([rel_errors[n] for n in names], dtype=np.float64)
    # zero errors happen for parameters a variant never touches; floor them
    # so the log axis stays drawable
    floor = max(1e-16, vals[vals > 0].min() / 10) if np.any(vals > 0) else 1e-16
    shown = np.maximum(vals, floor)
    colors = ["tab:red" if v > threshold else "tab:green" for v in vals]

    fig, ax = plt.subplots(figsize=(7, 0.28 * len(names) + 1.5))
    ax.barh(range(len(names)), shown, color=colors)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xscale("log")
    ax.axvline(threshold, color="black", ls="--", lw=1, label=f"threshold {threshold:g}")
    ax.set_xlabel("max relative error vs finite differences")
    ax.set_title("gradient check")
    ax.legend(loc="lower right", fontsize=8)
    ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)
