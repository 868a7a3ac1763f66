"""Derive security requirements from functional requirements via ASVS retrieval."""

__version__ = "0.1.0"
