"""Spatio-temporal artery-vein segmentation of DSA series."""

__version__ = "0.1.0"
