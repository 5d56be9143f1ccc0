"""Longitudinal predictive conformal inference for panel data."""

__version__ = "0.1.0"
