"""Range-view processing services."""
