"""Restoration of MP3-compressed music with a conditional Wasserstein GAN."""

__version__ = "0.1.0"
