"""Token-level prompt-embedding redirection on a synthetic embedding/latent world."""

__version__ = "0.1.0"
