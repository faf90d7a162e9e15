"""Conformer-based CSI feedback autoencoder with vector-quantized feedback, on a small numpy autodiff."""

from .autodiff import ConfigError, DimensionError, NumericError, Tensor, UsageError
from .channel import ChannelConfig
from .conformer import ConformerConfig, CsiConformer
from .training import TrainConfig, train

__all__ = ["ChannelConfig", "ConfigError", "ConformerConfig", "CsiConformer", "DimensionError",
           "NumericError", "Tensor", "TrainConfig", "UsageError", "train"]
__version__ = "0.1.0"
