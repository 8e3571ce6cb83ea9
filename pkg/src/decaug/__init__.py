"""Decomposed feature representation with semantic augmentation for OoD generalization."""

__version__ = "0.1.0"
