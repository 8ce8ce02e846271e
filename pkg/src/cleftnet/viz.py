"""Report rendering: PGM slice panels and matplotlib figures.

Slice panels go out both as raw P5 portable graymaps (one image per panel,
inspectable anywhere) and as a composite matplotlib figure next to the
delimited report files.
"""
from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def to_gray_u8(img: np.ndarray) -> np.ndarray:
    """Scale a 2-D array into u8 grays (binary masks map to 0/255)."""
    a = np.asarray(img, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def save_pgm(path, img: np.ndarray) -> None:
    """Write a 2-D u8 image as a binary (P5) portable graymap."""
    a = np.ascontiguousarray(img, dtype=np.uint8)
    if a.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D image, got shape {a.shape}")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def pick_slices(gt: np.ndarray, count: int) -> list:
    """Indices of the slices with the most ground-truth voxels (middle if none)."""
    per_slice = np.asarray(gt).reshape(gt.shape[0], -1).sum(axis=1)
    if per_slice.sum() == 0:
        return [gt.shape[0] // 2]
    order = np.argsort(per_slice)[::-1]
    return sorted(int(i) for i in order[:count])


def export_slice_panels(out_dir, gt: np.ndarray, pred: np.ndarray,
                        raw: np.ndarray | None = None, count: int = 3) -> list:
    """PGM panels plus one composite PNG for a few informative slices.

    Returns the list of written paths.
    """
    import os

    indices = pick_slices(gt, count)
    written = []
    n_cols = 3 if raw is not None else 2
    fig, axes = plt.subplots(len(indices), n_cols,
                             figsize=(3 * n_cols, 3 * len(indices)), squeeze=False)
    for r, z in enumerate(indices):
        panels = []
        if raw is not None:
            panels.append(("raw", to_gray_u8(raw[z])))
        panels.append(("gt", to_gray_u8(gt[z])))
        panels.append(("pred", to_gray_u8(pred[z])))
        for c, (tag, img) in enumerate(panels):
            path = os.path.join(out_dir, f"slice{z:04d}_{tag}.pgm")
            save_pgm(path, img)
            written.append(path)
            ax = axes[r][c]
            ax.imshow(img, cmap="gray", vmin=0, vmax=255)
            ax.set_title(f"z={z} {tag}", fontsize=9)
            ax.axis("off")
    fig.tight_layout()
    png = os.path.join(out_dir, "slices.png")
    fig.savefig(png, dpi=110)
    plt.close(fig)
    written.append(png)
    return written


def plot_history(history, out_png) -> None:
    """Loss curves (and validation score when present) from a training history."""
    rows = history.rows
    fig, ax = plt.subplots(figsize=(7, 4))
    its = [r.iteration for r in rows]
    ax.plot(its, [r.total for r in rows], label="total", lw=1.2)
    ax.plot(its, [r.seg for r in rows], label="segmentation", lw=0.8, alpha=0.8)
    ax.plot(its, [r.boundary for r in rows], label="boundary", lw=0.8, alpha=0.8)
    ax.plot(its, [r.coherence for r in rows], label="coherence", lw=0.8, alpha=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    if history.evals:
        ax2 = ax.twinx()
        ax2.plot([e.iteration for e in history.evals],
                 [e.cremi for e in history.evals],
                 "o--", color="tab:red", ms=3, lw=0.8, label="val distance score")
        ax2.set_ylabel("validation distance score")
        ax2.legend(loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
