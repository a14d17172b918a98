"""Vector-quantised autoregressive forecasting."""

__version__ = "0.1.0"
