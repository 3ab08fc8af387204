"""Dynamic feature selection from variable feature sets using features of features."""

__version__ = "0.1.0"
