"""Structured deep kernel networks."""
