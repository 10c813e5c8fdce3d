"""Neural temporal point process for marked clinical event sequences."""

__version__ = "0.1.0"
