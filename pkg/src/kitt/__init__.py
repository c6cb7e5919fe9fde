"""Transformer-based kernel selection for Gaussian process regression."""

__version__ = "0.1.0"
