"""Synthesize labeled instances from tag-level (inexact) supervision.

The package trains a graph-aware semi-supervised generative model on a small
labeled pool plus a larger unlabeled pool, samples new labeled instances from
it, and benchmarks how much the synthetic data helps a downstream classifier.
"""

__version__ = "0.1.0"
