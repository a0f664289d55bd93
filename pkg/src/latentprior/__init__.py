"""Diffusion prior mapping joint image/text embeddings to a frozen generator's latent space."""

__version__ = "0.1.0"
