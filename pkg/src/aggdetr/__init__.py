"""Detection transformer with class-query and foreground-query global aggregation."""

__version__ = "0.1.0"
