"""Robust logistic regression for noisy user tags."""

__version__ = "0.1.0"
