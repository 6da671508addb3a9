"""Dyadic chat with proxy agents relaying information between isolated environments."""

__version__ = "0.1.0"
