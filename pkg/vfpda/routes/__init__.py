"""Routes package for the assimilation API."""
