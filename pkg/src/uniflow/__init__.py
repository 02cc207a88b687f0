"""Desk-scale unified flow-matching generation for time-aligned and non-time-aligned tasks."""

__version__ = "0.1.0"
