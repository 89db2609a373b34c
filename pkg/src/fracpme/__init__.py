"""Particle, intermediate and macro solvers for the fractional porous-medium equation."""
__version__ = "0.1.0"
