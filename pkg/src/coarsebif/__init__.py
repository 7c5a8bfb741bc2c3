"""Learned macroscopic right-hand sides and coarse bifurcation analysis from lattice Boltzmann data."""

__version__ = "0.1.0"
