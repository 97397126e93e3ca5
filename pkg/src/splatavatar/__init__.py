"""Semantic Gaussian-splatting avatars on the CPU."""
__version__ = "0.1.0"
