"""Decoder-coupled drift training over a validity-by-construction molecular grammar."""

__version__ = "0.1.0"
