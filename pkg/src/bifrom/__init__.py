"""Data-driven reduced-order models for parameterized bifurcating systems."""

__version__ = "0.1.0"
