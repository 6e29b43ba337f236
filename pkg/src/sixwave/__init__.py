"""Simulation and analysis of delayed six-wave-mixing photon pairs from atomic spin waves."""

__version__ = "0.1.0"
