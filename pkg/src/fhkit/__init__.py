"""Factored hybrid HMM acoustic modeling without state tying."""

__version__ = "0.1.0"
