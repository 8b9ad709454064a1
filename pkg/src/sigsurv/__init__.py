"""Dynamic survival analysis with controlled latent states."""

__version__ = "0.1.0"
