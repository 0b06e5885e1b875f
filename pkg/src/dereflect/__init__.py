"""Toolkit for single-image reflection removal with a one-step latent denoiser."""

__version__ = "0.1.0"
