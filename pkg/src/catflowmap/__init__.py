"""Categorical flow maps: simplex-constrained flow maps for few-step generation."""

__version__ = "0.1.0"
