"""Bayesian models of patent cooperation networks and patenting trends."""

__version__ = "0.1.0"
