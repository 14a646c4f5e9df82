"""Learned multi-object association on top of a frozen detector's query stream."""

__version__ = "0.1.0"
