"""Leakage-aware benchmark toolkit for encrypted-traffic classification."""

__version__ = "0.1.0"
