"""Extreme channel prior embedded network for dynamic scene deblurring, on NumPy."""

from .ecpel import bright_extract, dark_extract, ecpel_forward, extract_backward
from .network import NetworkConfig, build_network, forward
from .objective import LossConfig, multiscale_loss
from .tensor import ShapeError, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "LossConfig",
    "NetworkConfig",
    "ShapeError",
    "Tensor",
    "backward",
    "bright_extract",
    "build_network",
    "dark_extract",
    "ecpel_forward",
    "extract_backward",
    "forward",
    "multiscale_loss",
]
