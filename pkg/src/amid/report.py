"""Figure rendering for the report-producing commands.

Every CSV a command writes gets a matplotlib companion rendered to PNG so
runs can be eyeballed without loading the delimited data.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_DPI = 120


def write_csv(path: str, rows: list, fieldnames: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def save_loss_curves(log_rows: list, path: str) -> None:
    if not log_rows:
        return
    steps = [r["step"] for r in log_rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, style in (("l1", "-"), ("l2", "--"), ("total", ":")):
        ax.plot(steps, [r[key] for r in log_rows], style, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_ssim_pdf_figure(curves: dict, path: str) -> None:
    """curves: label -> SSIMPdf."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pdf in curves.items():
        centers = 0.5 * (pdf.bin_edges[:-1] + pdf.bin_edges[1:])
        ax.plot(centers, pdf.densities, label=label)
    ax.set_xlabel("SSIM")
    ax.set_ylabel("density")
    ax.set_title("cross-pair SSIM densities")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_roc_figure(curves: dict, path: str) -> None:
    """curves: label -> (fpr, tpr, auc)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, (fpr, tpr, auc_value) in curves.items():
        ax.plot(fpr, tpr, label=f"{label} (AUC {auc_value:.3f})")
    ax.plot([0, 1], [0, 1], color="gray", linewidth=0.8, linestyle=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("SKE detection ROC")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_ablation_figure(rows: list, path: str) -> None:
    """rows: dicts with lambda / highfreq_residual_energy / ssim_gen_truth."""
    lams = [r["lambda"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.plot(lams, [r["highfreq_residual_energy"] for r in rows], "o-")
    ax1.set_xlabel("consistency weight")
    ax1.set_ylabel("high-frequency energy fraction")
    ax2.plot(lams, [r["ssim_gen_truth"] for r in rows], "o-")
    ax2.set_xlabel("consistency weight")
    ax2.set_ylabel("mean SSIM vs ground truth")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_image_grid(images: list, path: str, ncols: int = 4, title: str | None = None) -> None:
    if not images:
        return
    n = len(images)
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.2 * nrows))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes:
        ax.axis("off")
    for ax, img in zip(axes, images):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
