"""Coarse-to-fine label recovery with feature-entropy regularized training."""

__version__ = "0.1.0"
