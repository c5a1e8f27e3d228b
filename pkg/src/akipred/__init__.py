"""Continuous 48-hour prediction of moderate-to-severe acute kidney injury from EHR time series."""

__version__ = "0.1.0"
