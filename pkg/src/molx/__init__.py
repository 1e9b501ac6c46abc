"""Desk-scale molecule encoders aligned to a small character-level language model."""

__version__ = "0.1.0"
