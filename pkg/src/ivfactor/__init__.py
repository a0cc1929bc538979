"""Factorized and discriminatively retrained i-vector extractors."""
__version__ = "0.1.0"
