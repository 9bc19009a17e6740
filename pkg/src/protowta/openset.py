"""Confidence measures and acceptance/rejection threshold sweeps.

Two per-sample confidences are computed from a trained paired-prototype
model, both the probability mass of the winning class:

* the inner-product measure pools raw collapsed scores (no temperature),
* the positive-prototype measure pools distances to the positive centers
  only, scaled by the trained beta.

An input far from every positive prototype gets a low second measure
even when the first is saturated, which is what makes outliers and
adversarial images rejectable.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import models

MEASURES = ("ip", "plus_ed")

__all__ = [
    "ConfidenceReport",
    "ThresholdSweep",
    "default_thresholds",
    "confidence_ip",
    "confidence_plus_ed",
    "confidence_report",
    "batch_confidences",
    "threshold_sweep",
    "best_threshold",
]


@dataclass(frozen=True)
class ConfidenceReport:
    predicted_class: int
    winning_neuron: int
    p_ip: float
    p_plus_ed: float


@dataclass(frozen=True, eq=False)
class ThresholdSweep:
    """Acceptance (in-set) and rejection (out-set) rates per threshold."""

    thresholds: np.ndarray
    acceptance_rate: np.ndarray
    rejection_rate: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold", "acceptance_rate", "rejection_rate"])
            for t, a, r in zip(self.thresholds, self.acceptance_rate,
                               self.rejection_rate):
                writer.writerow([f"{t:.6f}", f"{a:.6f}", f"{r:.6f}"])


def default_thresholds():
    """0.00 to 1.00 in steps of 0.01."""
    return np.linspace(0.0, 1.0, 101)


def _group_mass(scores, class_of, winners, K):
    """Probability mass of each row's winning class under softmax(scores)."""
    scores = np.atleast_2d(scores)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1)
    class_sums = np.zeros((scores.shape[0], K))
    for k in range(K):
        class_sums[:, k] = e[:, class_of == k].sum(axis=1)
    win_class = class_of[winners]
    return class_sums[np.arange(scores.shape[0]), win_class] / total


def _ip_confidences(model, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    z = models.pn_ed_forward(model, X)
    winners = np.argmax(z, axis=1)
    asg = model.assignment
    return _group_mass(z, asg.class_of, winners, asg.K), winners


def _plus_ed_confidences(model, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    z = models.pn_ed_forward(model, X)
    winners = np.argmax(z, axis=1)
    cp = model.c_plus
    p_norms = np.einsum("md,md->m", cp, cp)
    x_norms = np.einsum("nd,nd->n", X, X)
    sq = np.maximum(x_norms[:, None] - 2.0 * (X @ cp.T) + p_norms[None, :], 0.0)
    scores = -0.5 * model.beta * sq
    asg = model.assignment
    return _group_mass(scores, asg.class_of, winners, asg.K), winners


def confidence_ip(model, x):
    """Winning-class probability from the collapsed inner-product scores.

    Deliberately computed on the raw scores without the temperature.
    """
    conf, _ = _ip_confidences(model, x)
    return float(conf[0])


def confidence_plus_ed(model, x):
    """Winning-class probability from distances to positive centers only,
    exp(-beta/2 ||x - c_j+||^2) pooled over the winning class.
    """
    conf, _ = _plus_ed_confidences(model, x)
    return float(conf[0])


def confidence_report(model, x):
    """Both confidence measures plus the prediction for one input."""
    p_ip, winners = _ip_confidences(model, x)
    p_ed, _ = _plus_ed_confidences(model, x)
    neuron = int(winners[0])
    return ConfidenceReport(int(model.assignment.class_of[neuron]), neuron,
                            float(p_ip[0]), float(p_ed[0]))


def batch_confidences(model, X, measure):
    """Vectorized per-sample confidences for a whole feature matrix."""
    if measure == "ip":
        conf, _ = _ip_confidences(model, X)
    elif measure == "plus_ed":
        conf, _ = _plus_ed_confidences(model, X)
    else:
        raise ValueError(f"measure must be one of {MEASURES}, got {measure!r}")
    return conf


def threshold_sweep(model, in_set, out_set, measure, thresholds=None):
    """Acceptance rate on the in-set and rejection rate on the out-set.

    A sample is accepted when its confidence is >= the threshold, so
    acceptance is non-increasing and rejection non-decreasing as the
    threshold grows. Confidences are computed once and reused.
    """
    in_X = in_set.features if hasattr(in_set, "features") else np.asarray(in_set)
    out_X = out_set.features if hasattr(out_set, "features") else np.asarray(out_set)
    if len(in_X) == 0 or len(out_X) == 0:
        raise ValueError("threshold sweep needs nonempty in and out sets")
    thresholds = (default_thresholds() if thresholds is None
                  else np.asarray(thresholds, dtype=np.float64))
    if thresholds.size == 0 or np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be a nonempty ascending grid")
    conf_in = batch_confidences(model, in_X, measure)
    conf_out = batch_confidences(model, out_X, measure)
    acceptance = (conf_in[None, :] >= thresholds[:, None]).mean(axis=1)
    rejection = (conf_out[None, :] < thresholds[:, None]).mean(axis=1)
    return ThresholdSweep(thresholds, acceptance, rejection)


def best_threshold(sweep):
    """Threshold maximizing acceptance * rejection; ties break low."""
    if sweep.thresholds.size == 0:
        raise ValueError("empty sweep")
    product = sweep.acceptance_rate * sweep.rejection_rate
    return float(sweep.thresholds[int(np.argmax(product))])
