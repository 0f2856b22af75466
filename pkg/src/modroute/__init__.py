"""Modality-guided mixture-of-experts routing lab."""

__version__ = "0.1.0"
