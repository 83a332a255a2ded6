"""Robust matrix completion under deterministic sampling."""

__version__ = "0.1.0"
