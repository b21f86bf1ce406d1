"""Biased-qubit probing of finite quantum systems."""

__version__ = "0.1.0"
