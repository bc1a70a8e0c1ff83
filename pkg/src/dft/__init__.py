"""Decorrelated feature extraction and graph transformer layers for
unsupervised node-level graph domain adaptation."""

__version__ = "0.1.0"
