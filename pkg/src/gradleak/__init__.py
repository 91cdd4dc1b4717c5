"""Federated learning simulator and gradient-leakage attack laboratory."""

__version__ = "0.1.0"
