"""Shift-aware training for short-term multi-region traffic forecasting."""

__version__ = "0.1.0"
