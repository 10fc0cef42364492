"""Instance-level early stopping lab."""

__version__ = "0.1.0"
