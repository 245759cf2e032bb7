"""Polygon extraction from images as vertex token sequences plus an optimal vertex matching."""

__version__ = "0.1.0"
