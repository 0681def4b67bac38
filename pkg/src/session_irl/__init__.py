"""Recover linear user reward functions from interaction sessions with MaxEnt IRL."""

__version__ = "0.1.0"
