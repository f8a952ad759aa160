"""Product categorization as translation of titles into taxonomy paths."""

__version__ = "0.1.0"
