"""Shared-policy market training, CALSHEQ supertype calibration, a BO baseline and finite-game checks."""

__version__ = "0.1.0"
