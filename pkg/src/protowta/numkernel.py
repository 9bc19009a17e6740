"""Deterministic numeric primitives shared by every other module.

All arithmetic is 64-bit floating point. Score vectors and probability
vectors are plain 1-D float64 ndarrays; a probability vector is
nonnegative and sums to one within 1e-12.
"""

import numpy as np

__all__ = [
    "stable_softmax",
    "squared_euclidean",
    "argmax_tiebreak",
    "argmin_tiebreak",
    "seeded_stream",
]


def stable_softmax(z, beta=1.0):
    """Softmax of ``beta * z`` with unconditional max-subtraction.

    Max-subtraction keeps the exponentials bounded even when ``beta * z``
    has entries of magnitude up to 1e6, which happens early in training
    when the inverse temperature is still uncalibrated.

    Args:
        z: score vector, 1-D array of finite floats.
        beta: inverse temperature, must be > 0.

    Returns:
        Probability vector of the same length.
    """
    z = np.asarray(z, dtype=np.float64)
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    finite = np.isfinite(z)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValueError(f"non-finite score at index {bad}: {z[bad]}")
    e = np.exp(beta * z - np.max(beta * z))
    return e / e.sum()


def squared_euclidean(u, v):
    """Squared Euclidean distance sum_i (u_i - v_i)**2."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    d = u - v
    return float(np.dot(d, d))


def _check_winner_arg(v):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty vector has no winner")
    if not np.isfinite(v).all():
        bad = int(np.flatnonzero(~np.isfinite(v))[0])
        raise ValueError(f"non-finite entry at index {bad}: {v[bad]}")
    return v


def argmax_tiebreak(v):
    """Smallest index attaining the maximum. Ties always break low."""
    return int(np.argmax(_check_winner_arg(v)))


def argmin_tiebreak(v):
    """Smallest index attaining the minimum. Ties always break low."""
    return int(np.argmin(_check_winner_arg(v)))


def seeded_stream(seed):
    """Deterministic pseudo-random stream (PCG64).

    Same seed gives a bitwise-identical sequence of ``random()`` /
    ``standard_normal()`` draws within one build. Streams are
    single-consumer: never share one across concurrent tasks.

    ``seed`` may be an int or a sequence of ints (for derived
    per-worker streams).
    """
    return np.random.default_rng(seed)
