"""Retrieval and generation stages for conversational movie recommendation."""

__version__ = "0.1.0"
