"""Gradient-ascent adversarial example generation.

Attacks run against the collapsed inner-product form of a trained
model and maximize the log winning-class probability of a chosen
target class, the same quantity the rejection evaluation scores.
Type-1 samples grow out of pure noise; Type-2 samples perturb real
test images toward every wrong class.

Pixels are clipped into [0, 1] after every step, and non-converged
samples are kept (flagged) so corpus sizes are exact.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from . import models

__all__ = [
    "AdversarialConfig",
    "AdversarialSet",
    "input_gradient",
    "gen_type1",
    "gen_type2",
    "write_adversarial_idx",
    "write_adversarial_manifest",
]


@dataclass(frozen=True)
class AdversarialConfig:
    """Attack settings. Steps move along the unit max-norm gradient
    direction, so step_size is the largest per-pixel change per
    iteration and step_size * max_iters bounds the total perturbation.
    """

    step_size: float = 0.1
    max_iters: int = 500
    target_confidence: float = 0.99
    clip_lo: float = 0.0
    clip_hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if not 0 < self.target_confidence < 1:
            raise ValueError("target_confidence must be in (0, 1)")
        if self.clip_lo >= self.clip_hi:
            raise ValueError("empty clip range")


@dataclass(frozen=True, eq=False)
class AdversarialSet:
    """Generated samples with provenance, ordered by (source, target).

    source_labels uses -1 for pure-noise sources.
    """

    features: np.ndarray
    source_index: np.ndarray
    source_labels: np.ndarray
    target_labels: np.ndarray
    achieved_p_ip: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def n(self):
        return self.features.shape[0]


def _target_mass(z, assignment, targets):
    """P^IP of each row's target class, max-subtracted."""
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    total = e.sum(axis=1)
    mass = np.empty(len(z))
    for t in np.unique(targets):
        rows = targets == t
        mass[rows] = e[np.ix_(rows, assignment.neurons_of(t))].sum(axis=1)
    return mass / total


def input_gradient(model, x, target_class, beta=1.0):
    """Gradient with respect to x of ln P^IP for the target class.

    Closed form: sum_j (y'_j - y_j) w_j, where y is the softmax of the
    scores and y' the softmax restricted to the target's neurons.
    """
    asg = model.assignment
    if not 0 <= target_class < asg.K:
        raise ValueError(f"target class {target_class} out of range for K={asg.K}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("input_gradient takes a single feature vector")
    z = beta * models.ip_forward(model, x)
    e = np.exp(z - z.max())
    y = e / e.sum()
    idx = asg.neurons_of(target_class)
    zi = z[idx]
    ei = np.exp(zi - zi.max())
    coef = -y
    coef[idx] += ei / ei.sum()
    return beta * (coef @ model.weights)


def _ascend(model, x0, targets, config):
    """Batched ascent of ln P^IP toward per-row target classes."""
    asg = model.assignment
    w, b = model.weights, model.biases
    X = np.clip(np.asarray(x0, dtype=np.float64),
                config.clip_lo, config.clip_hi)
    targets = np.asarray(targets, dtype=np.int64)
    n = len(X)
    achieved = np.zeros(n)
    iterations = np.zeros(n, dtype=np.int64)
    active = np.arange(n)

    for step in range(config.max_iters + 1):
        z = X[active] @ w.T + b
        p = _target_mass(z, asg, targets[active])
        done = p >= config.target_confidence
        if done.any():
            rows = active[done]
            achieved[rows] = p[done]
            iterations[rows] = step
            active = active[~done]
            z = z[~done]
            p = p[~done]
        if active.size == 0 or step == config.max_iters:
            achieved[active] = p
            iterations[active] = step
            break
        e = np.exp(z - z.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)
        coef = -y
        for t in np.unique(targets[active]):
            rows = targets[active] == t
            idx = asg.neurons_of(t)
            sub = z[np.ix_(rows, idx)]
            sub = np.exp(sub - sub.max(axis=1, keepdims=True))
            coef[np.ix_(rows, idx)] += sub / sub.sum(axis=1, keepdims=True)
        grad = coef @ w
        # unit max-norm direction: every step moves each pixel by at most
        # step_size, independent of the weight scale
        peak = np.max(np.abs(grad), axis=1, keepdims=True)
        grad = np.divide(grad, peak, out=np.zeros_like(grad),
                         where=peak > 0)
        X[active] = np.clip(X[active] + config.step_size * grad,
                            config.clip_lo, config.clip_hi)

    converged = achieved >= config.target_confidence
    return X, achieved, iterations, converged


def gen_type1(model, n, config):
    """Grow n samples from uniform noise, targets assigned round-robin.

    Noise for sample i comes from its own stream keyed on (seed, i),
    so the set is identical however generation is partitioned.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    K = model.assignment.K
    x0 = np.empty((n, model.D))
    for i in range(n):
        x0[i] = np.random.default_rng([config.seed, i]).random(model.D)
    targets = np.arange(n) % K
    X, achieved, iterations, converged = _ascend(model, x0, targets, config)
    return AdversarialSet(X, np.arange(n),
                          np.full(n, -1, dtype=np.int64), targets,
                          achieved, iterations, converged)


def gen_type2(model, test_set, config, chunk_size=10000):
    """Perturb every test image toward each of the K-1 wrong classes.

    Output rows are ordered by (source index, target class), giving
    N * (K - 1) samples. Samples are independent, so processing in
    chunks changes nothing but peak memory.
    """
    if test_set.labels is None:
        raise ValueError("Type-2 generation needs a labeled test set")
    K = test_set.K
    n_src = test_set.n
    src_rows = np.repeat(np.arange(n_src), K - 1)
    src_labels = test_set.labels[src_rows].astype(np.int64)
    all_targets = np.tile(np.arange(K), n_src).reshape(n_src, K)
    targets = all_targets[all_targets != test_set.labels[:, None]]

    n = len(src_rows)
    X = np.empty((n, test_set.D))
    achieved = np.empty(n)
    iterations = np.empty(n, dtype=np.int64)
    converged = np.empty(n, dtype=bool)
    for lo in range(0, n, max(1, chunk_size)):
        hi = min(n, lo + max(1, chunk_size))
        x0 = test_set.features[src_rows[lo:hi]]
        (X[lo:hi], achieved[lo:hi], iterations[lo:hi],
         converged[lo:hi]) = _ascend(model, x0, targets[lo:hi], config)
    return AdversarialSet(X, src_rows, src_labels, targets,
                          achieved, iterations, converged)


def write_adversarial_idx(adv, path, rows, cols):
    """Persist features as an IDX image file (pixels quantized to bytes)."""
    if adv.features.shape[1] != rows * cols:
        raise ValueError(
            f"feature dimension {adv.features.shape[1]} != {rows}x{cols}")
    images = np.rint(adv.features * 255.0).astype(np.uint8)
    datamod.save_idx_images(images.reshape(-1, rows, cols), path)


def write_adversarial_manifest(adv, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["source_index", "source_label", "target_label",
                         "achieved_p_ip", "iterations"])
        for i in range(adv.n):
            label = ("noise" if adv.source_labels[i] < 0
                     else int(adv.source_labels[i]))
            writer.writerow([int(adv.source_index[i]), label,
                             int(adv.target_labels[i]),
                             f"{adv.achieved_p_ip[i]:.6f}",
                             int(adv.iterations[i])])
