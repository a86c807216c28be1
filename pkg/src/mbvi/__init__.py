"""Moment-based variational smoothing and inference for latent diffusions."""

__version__ = "0.1.0"
