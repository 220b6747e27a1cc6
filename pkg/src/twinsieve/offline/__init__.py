"""Offline material: trusted dealer, bundle files and data-owner ingestion."""
