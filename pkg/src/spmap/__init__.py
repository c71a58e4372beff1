"""Semantic property maps: online Bayesian maps of vehicle properties in path coordinates."""

__version__ = "0.1.0"
