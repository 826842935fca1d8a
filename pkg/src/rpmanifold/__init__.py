"""Averaged stochastic approximation near manifolds of maxima."""

__version__ = "0.1.0"
