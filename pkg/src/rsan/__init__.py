"""Residual spatial attention encoder-decoder for vessel segmentation.

Self-contained: its own tensor autodiff core, the attention/residual building
blocks, the three network variants, training, metrics, and a data pipeline.
"""

from .errors import (CheckpointError, ConfigError, DivergenceError,
                     GradientMissingError, PaddingRequiredError, RsanError,
                     ShapeError)
from .layers import (RSAB, DropBlockConfig, PreActResidualBlock,
                     SpatialAttention, apply_dropblock, dropblock_gamma,
                     dropblock_mask)
from .network import (Network, NetworkConfig, build, load_checkpoint,
                      parameter_count, save_checkpoint)
from .tensor import Parameter, Tensor, backward, no_grad
from .training import AdamState, TrainConfig, adam_step, bce_loss, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "AdamState", "CheckpointError", "ConfigError", "DivergenceError",
    "DropBlockConfig", "GradientMissingError", "Network", "NetworkConfig",
    "PaddingRequiredError", "Parameter", "PreActResidualBlock", "RSAB",
    "RsanError", "ShapeError", "SpatialAttention", "Tensor", "TrainConfig",
    "adam_step", "apply_dropblock", "backward", "bce_loss", "build",
    "dropblock_gamma", "dropblock_mask", "load_checkpoint", "lr_at", "no_grad",
    "parameter_count", "save_checkpoint", "train",
]
