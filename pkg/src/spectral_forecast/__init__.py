"""Probabilistic autoregressive forecasting with spectral attention."""

__version__ = "0.1.0"
