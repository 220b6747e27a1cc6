"""Twinsieve: two-server private top-k retrieval over secret-shared embeddings."""

__version__ = "0.1.0"
