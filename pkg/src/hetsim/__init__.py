"""Heterogeneous-cluster SGD simulator with adaptive per-worker batch sizing."""

__version__ = "0.1.0"
