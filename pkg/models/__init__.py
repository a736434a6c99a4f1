"""Domain types and parameter models."""
