"""Exact experiments on the gain of entrainment for occupancy models."""

__version__ = "0.1.0"
