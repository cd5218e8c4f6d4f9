"""Long-context clinical document classification toolkit."""

__version__ = "0.1.0"
