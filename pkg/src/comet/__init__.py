"""Confidence-weighted meta-learning for anomaly detection on feature vectors.

Training samples are soft-weighted by an IQR fence over the model's own
anomaly scores, and parameter updates follow a first-order inner/outer loop
whose L2 coefficient adapts to the covariance between train and validation
losses. Two backbones (a coupling flow and an adapter/discriminator pair)
share a single per-sample-loss/score contract.
"""

from . import backbones, data, diffcore, harness, meta, metrics, scl

__all__ = ["backbones", "data", "diffcore", "harness", "meta", "metrics", "scl"]

__version__ = "0.1.0"
