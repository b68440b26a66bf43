"""Temporal stabilization of per-frame body mesh predictions for a static subject."""

__version__ = "0.1.0"
