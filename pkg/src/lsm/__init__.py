"""Tokenized PSD forecasting with small decoder-only transformers."""

__version__ = "0.1.0"
