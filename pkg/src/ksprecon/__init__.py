"""Streaming k-space reconstruction with lesion-detection evaluation."""

__version__ = "0.1.0"
