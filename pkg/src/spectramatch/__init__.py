"""Spectral block partitions of power sets and finite-level flow simulation."""

__version__ = "0.1.0"
