"""Desk-scale training-data extraction from unconditional diffusion models."""

__version__ = "0.1.0"
