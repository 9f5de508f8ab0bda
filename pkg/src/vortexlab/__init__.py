"""Numerical laboratory for vortex-ring based non-uniqueness of forced Navier-Stokes."""

__version__ = "0.1.0"
