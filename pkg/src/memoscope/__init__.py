"""Measurement instruments for memorization in gradient-trained MLPs."""

__version__ = "0.1.0"
