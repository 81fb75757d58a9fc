"""Degenerate second-order follow-the-leader dynamics and their continuum checks."""

__version__ = "0.1.0"
