"""Ensembling and learned fusion in the SR space of a conditional flow."""

__version__ = "0.1.0"
