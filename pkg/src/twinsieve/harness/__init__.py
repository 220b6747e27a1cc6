"""Evaluation harness: synthetic data, plaintext oracle, local clusters and reports."""
