"""Workbench for flat, hierarchical, multi-faceted, and biasnet task sharing."""

__version__ = "0.1.0"
