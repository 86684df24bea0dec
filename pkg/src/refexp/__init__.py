"""Referring-expression generation and grounding on a synthetic shape world."""

__version__ = "0.1.0"
