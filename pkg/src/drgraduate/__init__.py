"""Ordinal grading with Gaussian class probabilities, entropy uncertainty
and lesion-map explanations, on a small from-scratch autodiff engine."""

__version__ = "0.1.0"
