"""Amortized posterior sampling with conditional normalizing flows, plus a
physics-based diagonal latent correction for shifted observations."""

__version__ = "0.1.0"
