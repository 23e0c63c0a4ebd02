"""Directed variational problems in marked Poisson random potentials."""

__version__ = "0.1.0"
