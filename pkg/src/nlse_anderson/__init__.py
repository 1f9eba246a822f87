"""Toolkit for the 1D discrete NLSE with an Anderson random potential."""

__version__ = "0.1.0"
