"""Latent-space energy-based open-set recognition at desk scale."""

__version__ = "0.1.0"
