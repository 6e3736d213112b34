"""Constrained ensemble data assimilation: ETKF variants and variational Fokker-Planck particle flows."""

__version__ = "1.0.0"
