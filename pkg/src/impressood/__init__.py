"""Data-free OOD detection from classifier impressions."""

__version__ = "0.1.0"
