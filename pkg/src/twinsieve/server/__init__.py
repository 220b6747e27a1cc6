"""Retrieval server: query sessions, daemon and stats endpoint."""
