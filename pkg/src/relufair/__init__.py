"""Measure and mitigate the per-group accuracy cost of ReLU linearization."""

__version__ = "0.1.0"
