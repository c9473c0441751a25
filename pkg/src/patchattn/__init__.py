"""Patch-based attention over ordered crops, imbalance-aware training and class-balanced metrics."""

__version__ = "0.1.0"
