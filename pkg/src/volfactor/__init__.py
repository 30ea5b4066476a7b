"""Asymptotic portfolio choice with two correlated volatility factors."""

__version__ = "0.1.0"
