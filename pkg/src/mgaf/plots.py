"""Headless matplotlib figures written next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .decoder_eval import PRCurve


def save_pr_curve(pr: PRCurve, path: str | Path, title: str = "precision-recall") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(pr.recalls, pr.precisions, where="post", lw=1.5)
    ax.fill_between(pr.recalls, pr.precisions, step="post", alpha=0.15)
    ax.set_xlabel("recall (40 positions)")
    ax.set_ylabel("interpolated precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    ax.set_title(f"{title}  AP={pr.ap:.4f}  ({pr.n_gt} gt)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_loss_curves(log_csv: str | Path, path: str | Path) -> None:
    rows = Path(log_csv).read_text().strip().splitlines()
    header = rows[0].split(",")
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    if data.size == 0:
        return
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    step = data[:, 0]
    for i, name in enumerate(header[2:], start=2):
        ax1.plot(step, data[:, i], lw=1, label=name)
    ax1.set_xlabel("step")
    ax1.set_yscale("log")
    ax1.grid(alpha=0.3)
    ax1.legend(fontsize=7)
    ax2.plot(step, data[:, 1], lw=1)
    ax2.set_xlabel("step")
    ax2.set_ylabel("lr")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_calibration_scatter(scores, ious, plcc: float, srcc: float,
                             path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.scatter(ious, scores, s=12, alpha=0.6)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8, alpha=0.5)
    ax.set_xlabel("actual 3D IoU")
    ax.set_ylabel("detection confidence")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.set_title(f"PLCC={plcc:.3f}  SRCC={srcc:.3f}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_bev_map(arr: np.ndarray, path: str | Path, title: str = "") -> None:
    """Render a single-channel BEV grid (L, W) to an image file."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(arr.T, origin="lower", cmap="viridis", aspect="auto")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xlabel("x cells")
    ax.set_ylabel("y cells")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_grid_pgm(arr: np.ndarray, path: str | Path) -> None:
    """Binary PGM (P5) export of a 2D grid, min-max normalized."""
    a = np.asarray(arr, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    img = (scaled * 255.0).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())
