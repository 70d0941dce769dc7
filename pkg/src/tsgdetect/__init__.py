"""Diffusion noise-prediction features for synthetic-image detection."""

__version__ = "0.1.0"
