"""Diffusion-prior reconstruction with on-the-fly adapter fitting (DDIP / D3IP)."""

__version__ = "0.1.0"
