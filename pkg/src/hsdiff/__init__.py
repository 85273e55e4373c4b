"""Hyperspectral classification from purified, timestep-fused diffusion features."""

__version__ = "0.1.0"
