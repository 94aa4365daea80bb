"""Unsupervised camouflaged-fraud detection on text-attributed graphs."""

__version__ = "0.1.0"
