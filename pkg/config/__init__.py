"""Configuration package for Rangewrench."""
