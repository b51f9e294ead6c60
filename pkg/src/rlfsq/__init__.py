"""Residual FSQ speech token codec with a GRPO-trainable stochastic quantizer."""
from .codec import Codec, CodecConfig
from .quantizer import ResidualQuantizer

__all__ = ["Codec", "CodecConfig", "ResidualQuantizer"]
__version__ = "0.1.0"
