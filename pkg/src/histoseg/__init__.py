"""Dense semantic segmentation of stained tissue images.

A small, self-contained engine built on numpy: an 11-layer
fully-convolutional network with hand-derived gradients, Adam training
on augmented patches, exact striped full-image inference, overlap
metrics with significance testing, and k-means / threshold baselines.
"""
from .errors import (BalanceInfeasibleError, ConfigError, ContractError,
                     ModelFormatError, NumericalError)

__version__ = "0.1.0"

__all__ = [
    "BalanceInfeasibleError",
    "ConfigError",
    "ContractError",
    "ModelFormatError",
    "NumericalError",
    "__version__",
]
