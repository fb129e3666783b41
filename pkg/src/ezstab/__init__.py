"""Numerical stability experiments for the Epstein-Zin consumption-investment problem."""

__version__ = "0.1.0"
