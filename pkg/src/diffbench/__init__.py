"""Algorithmic differentiation engines benchmarked on GMM, bundle adjustment and hand tracking."""

__version__ = "0.1.0"
