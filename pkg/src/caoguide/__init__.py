"""Resection planning for airway tumors from multi-view reconstructions."""

__version__ = "0.1.0"
