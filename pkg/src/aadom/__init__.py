"""Acoustic anomaly detection for machine sounds with band-focused features."""

__version__ = "0.1.0"
