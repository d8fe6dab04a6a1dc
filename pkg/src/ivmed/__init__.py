"""Complier interventional mediation effects with instrumental variables."""

__version__ = "0.1.0"
