"""Core utilities: exceptions and the frame worker pool."""
