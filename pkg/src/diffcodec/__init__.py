"""Desk-scale perceptual neural video codec with a diffusion decoder."""

__version__ = "0.1.0"
