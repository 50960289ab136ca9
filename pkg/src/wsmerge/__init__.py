"""Stable fine-tuning, weight-space merging and drift diagnostics."""

__version__ = "0.1.0"
