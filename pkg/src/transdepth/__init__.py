"""Depth completion for transparent objects from one RGB-D view plus a second RGB view."""

__version__ = "0.1.0"
