"""Landmark persistence scoring and map pruning for feature-based localisation."""

__version__ = "0.1.0"
