"""Latent-resampling image-language fusion with an exact FLOP cost model."""

__version__ = "0.1.0"
