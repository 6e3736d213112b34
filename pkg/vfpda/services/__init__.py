"""Numerical services: ensembles, constraints, analyses and the experiment harness."""
