"""Learned lossless compression of Bayer raw images with bit-depth-adaptive entropy coding."""

from .container import Codec, Mode
from .rawio import BayerImage, Pattern

__version__ = "0.1.0"
__all__ = ["BayerImage", "Codec", "Mode", "Pattern", "__version__"]
