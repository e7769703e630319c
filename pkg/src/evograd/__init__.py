"""Evolutionary search over backward-propagation update equations."""

__version__ = "0.1.0"
