"""Simulation and estimation of branching capacity on Z^d."""

__version__ = "0.1.0"
