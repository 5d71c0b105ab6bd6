"""Constrained inference for longitudinal models: QIF fits, GQS tests and chi-bar-squared weights."""

__version__ = "0.1.0"
