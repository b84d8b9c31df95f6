"""Offline figure generation from training run metrics files."""

__version__ = "0.1.0"
