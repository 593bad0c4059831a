"""Correspondence-guided consistent editing for diffusion samplers."""

__version__ = "0.1.0"
