"""Desk-scale PEP instance segmentation: object mining around detected instances."""

__version__ = "0.1.0"
