"""Verification/identification toolkit for tabular ECG fiducial features."""

__version__ = "0.1.0"
