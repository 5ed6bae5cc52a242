"""Pilot-token navigation laboratory on a symbolic grid world."""

__version__ = "0.1.0"
