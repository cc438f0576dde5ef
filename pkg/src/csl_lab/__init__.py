"""Numerical laboratory for continuous spontaneous localization collapse dynamics."""

__version__ = "0.1.0"
