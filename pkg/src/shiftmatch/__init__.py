"""Test-time matching of feature statistics for corruption-robust inference."""

__version__ = "0.1.0"
