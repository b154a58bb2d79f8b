"""Thermal-aware real-time scheduling toolkit."""

__version__ = "0.1.0"
