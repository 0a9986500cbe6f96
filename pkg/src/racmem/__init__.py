"""Retrieval-augmented classification over precomputed embeddings."""

__version__ = "0.1.0"
