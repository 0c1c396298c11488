"""Report figures rendered to files next to the delimited outputs."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def save_metrics_figure(report, path) -> None:
    """Per-image PSNR/SSIM bars, model against the zero-filled baseline."""
    plt = _plt()
    idx = np.arange(len(report.rows))
    zp = [r.zf_psnr for r in report.rows]
    mp = [r.model_psnr for r in report.rows]
    zs = [r.zf_ssim for r in report.rows]
    ms = [r.model_ssim for r in report.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    width = 0.4
    ax1.bar(idx - width / 2, zp, width, label="zero-filled")
    ax1.bar(idx + width / 2, mp, width, label="model")
    ax1.set_xlabel("image")
    ax1.set_ylabel("PSNR (dB)")
    ax1.legend()
    ax2.bar(idx - width / 2, zs, width, label="zero-filled")
    ax2.bar(idx + width / 2, ms, width, label="model")
    ax2.set_xlabel("image")
    ax2.set_ylabel("SSIM")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_macs_figure(report, path) -> None:
    """Horizontal bars of per-block MAC totals."""
    plt = _plt()
    blocks = report.block_totals()
    names = [b for b, _ in blocks]
    giga = [m / 1e9 for _, m in blocks]
    fig, ax = plt.subplots(figsize=(8, 0.4 * len(names) + 1.5))
    ax.barh(np.arange(len(names)), giga)
    ax.set_yticks(np.arange(len(names)), names)
    ax.invert_yaxis()
    ax.set_xlabel("MACs (G)")
    ax.set_title(f"{report.config_name} @ {report.input_extent[0]}x{report.input_extent[1]}"
                 f" : {report.total_giga:.2f} G total")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(log_rows: Sequence[Tuple[int, float, float, float]], path) -> None:
    plt = _plt()
    steps = [r[0] for r in log_rows]
    losses = [r[2] for r in log_rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_image_figure(images: Sequence[np.ndarray], titles: Sequence[str], path) -> None:
    plt = _plt()
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4))
    if n == 1:
        axes = [axes]
    for ax, img, title in zip(axes, images, titles):
        ax.imshow(np.asarray(img), cmap="gray")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap_figure(x_u: np.ndarray, canvas: np.ndarray,
                        query: Tuple[int, int], scale: int, path) -> None:
    """Input with the attention heatmap resampled on top; the query is starred."""
    plt = _plt()
    up = np.repeat(np.repeat(canvas, scale, axis=0), scale, axis=1)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(np.asarray(x_u), cmap="gray")
    ax.imshow(up, cmap="inferno", alpha=0.55)
    ax.scatter([query[1] * scale + scale / 2], [query[0] * scale + scale / 2],
               marker="*", s=140, c="lime")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_deformation_figure(x_u: np.ndarray, field_img: np.ndarray,
                            points_img: Optional[np.ndarray], path) -> None:
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4.6))
    ax1.imshow(np.asarray(x_u), cmap="gray")
    if points_img is not None and len(points_img):
        ax1.scatter(points_img[:, 1], points_img[:, 0], s=2, c="red")
    ax1.set_title("deformed points")
    ax1.axis("off")
    im = ax2.imshow(field_img, cmap="viridis")
    ax2.set_title("offset magnitude")
    ax2.axis("off")
    fig.colorbar(im, ax=ax2, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
