"""Whitening-based diffusion restoration for linear inverse problems with
spatially correlated Gaussian noise."""

__version__ = "0.1.0"
