"""Chromosome straightening by motion transfer with a patch-attention discriminator."""

__version__ = "0.1.0"
