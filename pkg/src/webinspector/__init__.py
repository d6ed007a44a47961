"""Hierarchical multi-scale detection of malicious web content from hashed token bags."""

__version__ = "0.1.0"
