"""Symmetric CTM contraction of C4V iPEPS with exact fixed-point gradients."""

__version__ = "0.1.0"
