"""Discrete-time load-balancing laboratory."""

__version__ = "0.1.0"
