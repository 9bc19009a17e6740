"""Rendering of weight/center matrices and report figures.

Prototype grids use a signed colormap over the whole matrix: values are
scaled by the global max magnitude, positives go to the green channel,
negatives to red. The alternative grayscale map folds positives into
[0, 0.5] and negatives into [0.5, 1]. Sweep and training curves render
through matplotlib to PNG files next to the CSV output.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridSpec",
    "render_signed_grid",
    "write_image",
    "plot_sweep",
    "plot_train_stats",
]


@dataclass(frozen=True)
class GridSpec:
    """Layout: rows x cols cells (row per class), each cell_h x cell_w."""

    rows: int
    cols: int
    cell_h: int = 28
    cell_w: int = 28
    colormap: str = "signed_green_red"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.cell_h < 1 or self.cell_w < 1:
            raise ValueError("grid dimensions must be positive")
        if self.colormap not in ("signed_green_red", "grayscale"):
            raise ValueError(f"unknown colormap {self.colormap!r}")


def render_signed_grid(matrix, spec):
    """Tile matrix rows into an image grid with 1-pixel white separators.

    The whole matrix shares one scale (its max absolute value), so cell
    brightness is comparable across neurons and any positive rescaling
    of the matrix renders identically.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {matrix.shape}")
    m, d = matrix.shape
    if m != spec.rows * spec.cols:
        raise ValueError(
            f"{m} matrix rows do not tile a {spec.rows}x{spec.cols} grid")
    if d != spec.cell_h * spec.cell_w:
        raise ValueError(
            f"row length {d} does not fill a {spec.cell_h}x{spec.cell_w} cell")

    scale = np.max(np.abs(matrix))
    if scale == 0.0:
        scale = 1.0
    cells = matrix.reshape(spec.rows, spec.cols, spec.cell_h, spec.cell_w)
    height = spec.rows * (spec.cell_h + 1) + 1
    width = spec.cols * (spec.cell_w + 1) + 1

    if spec.colormap == "grayscale":
        # positives map into [0, 0.5], negatives into [0.5, 1]
        out = np.full((height, width), 255, dtype=np.uint8)
        shade = np.floor(255.0 * (1.0 - cells / scale) / 2.0)
    else:
        out = np.full((height, width, 3), 255, dtype=np.uint8)
        level = np.floor(255.0 * np.abs(cells) / scale)

    for r in range(spec.rows):
        for c in range(spec.cols):
            y0 = 1 + r * (spec.cell_h + 1)
            x0 = 1 + c * (spec.cell_w + 1)
            window = out[y0:y0 + spec.cell_h, x0:x0 + spec.cell_w]
            if spec.colormap == "grayscale":
                window[:] = shade[r, c].astype(np.uint8)
            else:
                pos = cells[r, c] >= 0
                window[:] = 0
                window[..., 1] = np.where(pos, level[r, c], 0).astype(np.uint8)
                window[..., 0] = np.where(pos, 0, level[r, c]).astype(np.uint8)
    return out


def write_image(image, path):
    """Write an image: .png for RGB or grayscale, .pgm (P5) for grayscale.

    PGM cannot hold a signed (RGB) rendering; re-render with the
    grayscale colormap for PGM output.
    """
    image = np.asarray(image)
    path = str(path)
    if path.lower().endswith(".pgm"):
        if image.ndim != 2:
            raise ValueError(
                "PGM output is grayscale only; use colormap='grayscale'")
        with open(path, "wb") as f:
            f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
            f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
        return
    if path.lower().endswith(".png"):
        from PIL import Image

        if image.ndim == 2:
            img = Image.fromarray(image.astype(np.uint8), mode="L")
        elif image.ndim == 3 and image.shape[2] == 3:
            img = Image.fromarray(image.astype(np.uint8), mode="RGB")
        else:
            raise ValueError(f"cannot encode image of shape {image.shape}")
        img.save(path, format="PNG")
        return
    raise ValueError(f"{path}: unsupported image extension (use .png or .pgm)")


def _agg_pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_sweep(sweep, path, title=""):
    """Acceptance/rejection curves against the threshold grid."""
    plt = _agg_pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(sweep.thresholds, sweep.acceptance_rate, label="acceptance (in-set)")
    ax.plot(sweep.thresholds, sweep.rejection_rate, label="rejection (out-set)")
    ax.set_xlabel("threshold")
    ax.set_ylabel("rate")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_train_stats(stats, path):
    """Loss and train-accuracy curves from per-epoch statistics."""
    plt = _agg_pyplot()
    epochs = [s.epoch for s in stats]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [s.loss for s in stats])
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean CCE loss")
    ax1.grid(True, alpha=0.3)
    ax2.plot(epochs, [s.train_acc for s in stats])
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("train accuracy")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
