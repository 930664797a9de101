"""Dropout ensemble Kalman inversion and companion tools."""

__version__ = "0.1.0"
