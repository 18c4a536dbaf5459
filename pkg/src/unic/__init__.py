"""Clustering frozen embeddings with mined positive and negative neighbors."""

__version__ = "0.1.0"
