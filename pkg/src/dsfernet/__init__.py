"""Bitemporal change detection with Hopfield feature retrieval, in plain numpy."""

__version__ = "0.1.0"
