"""Dataset ingestion: IDX files, grayscale image directories, assembly.

Features are pixel intensities scaled by 1/255 into [0, 1]; images are
flattened row-major, so a 28x28 image becomes a 784-vector. Outlier sets
carry no labels.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

__all__ = [
    "Sample",
    "Dataset",
    "load_idx_images",
    "load_idx_labels",
    "save_idx_images",
    "load_pgm",
    "load_grayscale_dir",
    "resize_bilinear",
    "assemble_dataset",
]


@dataclass(frozen=True)
class Sample:
    """One feature vector in [0,1]^D with a class label (None = unlabeled)."""

    features: np.ndarray
    label: int | None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labeled (or unlabeled) dataset.

    features: (N, D) float64 in [0, 1]; labels: (N,) int64 or None;
    class_counts: per-class sample counts, all zero for unlabeled sets.
    """

    features: np.ndarray
    labels: np.ndarray | None
    K: int
    name: str = ""
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", f)
        if self.labels is not None:
            object.__setattr__(
                self, "labels", np.ascontiguousarray(self.labels, dtype=np.int64))
        if f.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {f.shape}")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise ValueError("features outside [0, 1]")
        if self.labels is not None:
            if len(self.labels) != len(f):
                raise ValueError(
                    f"{len(self.labels)} labels for {len(f)} samples")
            if self.labels.size and (self.labels.min() < 0
                                     or self.labels.max() >= self.K):
                bad = int(self.labels.max())
                raise ValueError(f"label {bad} out of range for K={self.K}")
            counts = np.bincount(self.labels, minlength=self.K)
        else:
            counts = np.zeros(self.K, dtype=np.int64)
        f.flags.writeable = False
        if self.labels is not None:
            self.labels.flags.writeable = False
        object.__setattr__(self, "class_counts", counts)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def D(self):
        return self.features.shape[1]

    def sample(self, i):
        lab = None if self.labels is None else int(self.labels[i])
        return Sample(self.features[i], lab)

    def subset(self, indices, name=None):
        labs = None if self.labels is None else self.labels[indices].copy()
        return Dataset(self.features[indices].copy(), labs, self.K,
                       name if name is not None else self.name)


def _read_be32(f, path, what):
    raw = f.read(4)
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated while reading {what}")
    return struct.unpack(">i", raw)[0]


def load_idx_images(path):
    """Parse a big-endian IDX image file into a (N, rows, cols) uint8 array.

    Layout: 4-byte magic 2051, then N, rows, cols as 4-byte big-endian
    signed integers, then N*rows*cols unsigned bytes row-major.
    """
    with open(path, "rb") as f:
        magic = _read_be32(f, path, "magic")
        if magic != IMAGE_MAGIC:
            raise ValueError(
                f"{path}: bad image magic, expected {IMAGE_MAGIC}, got {magic}")
        n = _read_be32(f, path, "count")
        rows = _read_be32(f, path, "rows")
        cols = _read_be32(f, path, "cols")
        payload = f.read(n * rows * cols)
    if len(payload) < n * rows * cols:
        raise ValueError(
            f"{path}: truncated payload, expected {n * rows * cols} bytes, "
            f"got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def load_idx_labels(path):
    """Parse a big-endian IDX label file into a (N,) uint8 array."""
    with open(path, "rb") as f:
        magic = _read_be32(f, path, "magic")
        if magic != LABEL_MAGIC:
            raise ValueError(
                f"{path}: bad label magic, expected {LABEL_MAGIC}, got {magic}")
        n = _read_be32(f, path, "count")
        payload = f.read(n)
    if len(payload) < n:
        raise ValueError(
            f"{path}: truncated payload, expected {n} labels, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def save_idx_images(images, path):
    """Write a (N, rows, cols) uint8 array as an IDX image file."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"expected (N, rows, cols), got shape {images.shape}")
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def load_pgm(path):
    """Read a P2 (ASCII) or P5 (binary) PGM with maxval <= 255."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a P2/P5 PGM")
    binary = data[:2] == b"P5"

    # header tokens: magic, width, height, maxval, with '#' comments allowed
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    width, height, maxval = (int(t) for t in tokens)
    if not 0 < maxval <= 255:
        raise ValueError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace after maxval

    if binary:
        if len(data) - pos < width * height:
            raise ValueError(f"{path}: truncated PGM payload")
        pixels = np.frombuffer(data, dtype=np.uint8, count=width * height,
                               offset=pos)
    else:
        values = data[pos:].split()
        if len(values) < width * height:
            raise ValueError(f"{path}: truncated PGM payload")
        pixels = np.array([int(v) for v in values[:width * height]],
                          dtype=np.uint8)
    return pixels.reshape(height, width).copy()


def _load_gray_png(path):
    from PIL import Image

    with Image.open(path) as img:
        if img.mode != "L":
            raise ValueError(f"{path}: PNG mode {img.mode}, need 8-bit grayscale")
        return np.asarray(img, dtype=np.uint8).copy()


def load_grayscale_dir(path, permissive=False):
    """Load every PGM/PNG in a directory, sorted by filename.

    Mixed sizes are allowed (callers resize later). An unreadable or
    foreign file raises unless ``permissive`` is set, in which case it
    is skipped.

    Returns a list of 2-D uint8 arrays.
    """
    names = sorted(os.listdir(path))
    images = []
    for name in names:
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            continue
        try:
            if name.lower().endswith((".pgm",)):
                images.append(load_pgm(full))
            elif name.lower().endswith(".png"):
                images.append(_load_gray_png(full))
            else:
                raise ValueError(f"{full}: unrecognized image extension")
        except Exception:
            if not permissive:
                raise
    return images


def resize_bilinear(image, out_rows, out_cols):
    """Bilinear resize on pixel centers; returns the input dtype.

    Source coordinates are clamped at the border, so output intensities
    stay within the source range. An identity resize is an exact copy.
    """
    if out_rows <= 0 or out_cols <= 0:
        raise ValueError(f"target size must be positive, got {out_rows}x{out_cols}")
    image = np.asarray(image)
    in_rows, in_cols = image.shape
    if (in_rows, in_cols) == (out_rows, out_cols):
        return image.copy()

    src = image.astype(np.float64)
    ry = np.clip((np.arange(out_rows) + 0.5) * in_rows / out_rows - 0.5,
                 0, in_rows - 1)
    rx = np.clip((np.arange(out_cols) + 0.5) * in_cols / out_cols - 0.5,
                 0, in_cols - 1)
    y0 = np.floor(ry).astype(int)
    x0 = np.floor(rx).astype(int)
    y1 = np.minimum(y0 + 1, in_rows - 1)
    x1 = np.minimum(x0 + 1, in_cols - 1)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]

    out = (src[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
           + src[np.ix_(y0, x1)] * (1 - fy) * fx
           + src[np.ix_(y1, x0)] * fy * (1 - fx)
           + src[np.ix_(y1, x1)] * fy * fx)
    if np.issubdtype(image.dtype, np.integer):
        return np.rint(out).astype(image.dtype)
    return out.astype(image.dtype)


def assemble_dataset(images, labels, K, name=""):
    """Flatten images row-major and scale bytes by 1/255 into [0, 1].

    ``images`` is a (N, rows, cols) array or a list of equally-sized 2-D
    arrays; ``labels`` may be None for outlier sets.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected (N, rows, cols) images, got shape {arr.shape}")
    n = arr.shape[0]
    features = arr.reshape(n, -1) / 255.0
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64).copy()
        if len(labels) != n:
            raise ValueError(f"{n} images but {len(labels)} labels")
    return Dataset(features, labels, K, name)
