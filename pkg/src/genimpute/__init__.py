"""Generative imputation and stochastic prediction for incomplete tabular data."""
__version__ = "0.1.0"
