"""Hypernetwork fusion of tabular and image data."""

__version__ = "0.1.0"
