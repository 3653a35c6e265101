"""Entropy production and neural entropy for diffusion models, in plain numpy."""
from .gaussmix import GaussianMixture, MCEstimate
from .process import DiffusionSpec, sl, vp, vpx

__all__ = ["DiffusionSpec", "GaussianMixture", "MCEstimate", "sl", "vp", "vpx"]
__version__ = "0.1.0"
