"""Chained conditional normalizing flows for per-step trajectory densities."""

__version__ = "0.1.0"
