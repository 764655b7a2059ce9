"""Pyramid residual modules, stacked hourglasses and variance-aware initialization on numpy."""

__version__ = "0.1.0"
