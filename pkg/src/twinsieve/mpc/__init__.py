"""Secure-computation primitives: field, shares, DCF, comparison gate, dot products."""
