"""Shared fixtures: synthetic datasets, tiny IDX files, data discovery.

MNIST-dependent tests look for the four IDX files under $PROTOWTA_MNIST_DIR
(default: data/mnist below the repo root) and skip with a clear reason
when they are absent; the outlier set resolves the same way through
$PROTOWTA_ORL_DIR.
"""

import os
import struct

import numpy as np
import pytest

from protowta.data import Dataset

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_dir():
    return os.environ.get("PROTOWTA_MNIST_DIR",
                          os.path.join(REPO_ROOT, "data", "mnist"))


def mnist_paths_or_skip():
    base = mnist_dir()
    paths = {k: os.path.join(base, v) for k, v in MNIST_FILES.items()}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        pytest.skip(
            "MNIST IDX files not found (set PROTOWTA_MNIST_DIR or place "
            f"them under {base}); missing: {missing[0]}")
    return paths


def orl_dir_or_none():
    path = os.environ.get("PROTOWTA_ORL_DIR",
                          os.path.join(REPO_ROOT, "data", "orl"))
    return path if os.path.isdir(path) else None


def make_blobs(seed=42, K=3, modes=2, n_per=150, D=8, spread=0.06):
    """Multi-modal classes in [0,1]^D; exercises multiple neurons/class."""
    rng = np.random.default_rng(seed)
    centers = rng.random((K, modes, D))
    feats, labels = [], []
    for k in range(K):
        for m in range(modes):
            pts = np.clip(centers[k, m]
                          + spread * rng.standard_normal((n_per, D)), 0, 1)
            feats.append(pts)
            labels.append(np.full(n_per, k))
    X = np.vstack(feats)
    y = np.concatenate(labels)
    perm = rng.permutation(len(X))
    return Dataset(X[perm], y[perm], K, "blobs")


@pytest.fixture(scope="session")
def blob_data():
    return make_blobs()


def random_assignment(rng, K=3, per_class=2):
    from protowta.models import NeuronAssignment

    return NeuronAssignment.block(K, per_class)


def random_ip(rng, K=3, per_class=2, D=5, scale=1.0):
    from protowta.models import IpWtaModel

    asg = random_assignment(rng, K, per_class)
    return IpWtaModel(scale * rng.standard_normal((asg.M, D)),
                      scale * rng.standard_normal(asg.M), asg)


def random_ed(rng, K=3, per_class=2, D=5):
    from protowta.models import EdWtaModel

    asg = random_assignment(rng, K, per_class)
    return EdWtaModel(rng.standard_normal((asg.M, D)),
                      np.abs(rng.standard_normal(asg.M)),
                      float(rng.uniform(0.5, 3.0)), asg)


def random_pn_ed(rng, K=3, per_class=2, D=5):
    from protowta.models import PnEdWtaModel

    asg = random_assignment(rng, K, per_class)
    return PnEdWtaModel(rng.standard_normal((asg.M, D)),
                        rng.standard_normal((asg.M, D)),
                        float(rng.uniform(0.5, 3.0)), asg)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", 2051, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", 2049, len(labels)))
        f.write(labels.tobytes())


def blob_idx_files(tmp_path, ds=None, side=4):
    """Materialize a blob dataset as IDX files for CLI tests."""
    if ds is None:
        ds = make_blobs(D=side * side, n_per=60)
    images = np.rint(ds.features * 255).astype(np.uint8).reshape(-1, side, side)
    img_path = os.path.join(tmp_path, "images.idx")
    lab_path = os.path.join(tmp_path, "labels.idx")
    write_idx_images(img_path, images)
    write_idx_labels(lab_path, ds.labels)
    return img_path, lab_path, ds.K


@pytest.fixture()
def blob_idx(tmp_path):
    return blob_idx_files(str(tmp_path))
