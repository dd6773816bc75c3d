"""Spatiotemporal particle-based shape models with a time-variant linear dynamical system."""

__version__ = "0.1.0"
