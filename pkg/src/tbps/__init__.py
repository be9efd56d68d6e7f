"""Desk-scale text-based person search workbench."""

__version__ = "0.1.0"
