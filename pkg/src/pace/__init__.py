"""Posthoc concept extraction for a small numpy CNN."""

__version__ = "0.1.0"
