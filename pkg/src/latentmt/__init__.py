"""Latent-variable sequence-to-sequence translation at desk scale."""

__version__ = "0.1.0"
