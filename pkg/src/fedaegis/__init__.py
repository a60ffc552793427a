"""Robust aggregation for federated learning under adversarial clients.

The package pairs an attention-based attack-adaptive aggregation rule
(trained self-supervised from simulated attacks) with a desk-scale
federated-learning simulator, six classical baseline aggregators, and the
analysis tooling used to verify the rule's error-bound properties.
"""

__version__ = "0.1.0"

from .params import LayeredVector, RoundBatch, Schema, axpy, robust_mean, weighted_sum

__all__ = [
    "LayeredVector",
    "RoundBatch",
    "Schema",
    "axpy",
    "robust_mean",
    "weighted_sum",
    "__version__",
]
