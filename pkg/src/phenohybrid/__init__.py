"""Mechanistic and hybrid (MLP-in-the-loop) tree dormancy phenology models."""

__version__ = "0.1.0"
