"""Lattice toolkit for the random-field O(2) spin model."""

__version__ = "0.1.0"
