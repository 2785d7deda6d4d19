"""Face attribute inference with locally shared filters and one-pass patch extraction."""

from .interweave import interweaved_forward
from .layers import (
    FullyConnected,
    GlobalConv,
    LocalConv,
    MacCounter,
    MaxPool,
    Network,
    PatchGrid,
    ReLU,
    patch_forward_oracle,
)
from .tensor import Rect

__all__ = [
    "FullyConnected",
    "GlobalConv",
    "LocalConv",
    "MacCounter",
    "MaxPool",
    "Network",
    "PatchGrid",
    "ReLU",
    "Rect",
    "interweaved_forward",
    "patch_forward_oracle",
]

__version__ = "0.1.0"
