"""Transformer policy for merged conditional architecture search spaces."""

__version__ = "0.1.0"
