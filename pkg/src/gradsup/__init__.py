"""Gradient supervision from counterfactual pairs, on a small autodiff core."""

__version__ = "0.1.0"
