"""Bayesian-guided selection of microstructures from a finite design pool."""

__version__ = "0.1.0"
