"""Prototype-based winner-take-all classifiers.

Four model families (inner-product, Euclidean-distance, and their
positive/negative-prototype variants), exact equivalence conversions
between them, competitive cross-entropy trainers, and confidence-based
outlier/adversarial rejection.
"""

__version__ = "0.1.0"
