"""Ballistic-capture set cartography via truncated Taylor flow maps."""

__version__ = "0.1.0"
