"""Personalized retrieval-augmented explanation engine for recommendation."""

__version__ = "0.1.0"
