"""Command-line application layer of the multi-resolution MIL classifier."""

__version__ = "1.0.0"
