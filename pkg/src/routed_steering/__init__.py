"""Routed composition of elicited steering primitives on a small frozen transformer."""

__version__ = "0.1.0"
