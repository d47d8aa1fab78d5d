"""Sentiment-conditioned Transformer-GAN for symbolic music, on plain numpy."""

__version__ = "0.1.0"
