"""Decoupled RAW-to-sRGB development pipeline.

The conversion runs in a learned latent space: a multi-head codec embeds
RAW mosaics, grayscale, and sRGB images into one feature space; a
conditional diffusion model synthesizes grayscale detail features from the
RAW embedding; and a histogram-guided attention module recolors them before
decoding back to an sRGB image.
"""

from .errors import (
    CheckpointError,
    ConfigurationError,
    NumericError,
    OrderingError,
    ShapeError,
    SplitIspError,
    ValidationError,
)

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "NumericError",
    "OrderingError",
    "ShapeError",
    "SplitIspError",
    "ValidationError",
]

__version__ = "0.1.0"
