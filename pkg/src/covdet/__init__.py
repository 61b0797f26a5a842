"""Covariant feature detectors learned by regression under a covariance constraint."""

__version__ = "0.1.0"
