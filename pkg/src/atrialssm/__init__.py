"""Bi-atrial statistical shape modelling and P-wave simulation pipeline."""

__version__ = "0.1.0"
