"""Toy frozen-backbone segmenter with prompt-based adaptation strategies.

A small numpy laboratory for studying how a frozen vision-transformer
segmenter can be adapted to a shifted image domain by training only a few
extra tensors: an input-enhancing U-Net (head prompt), learnable tokens
prepended inside the encoder (prefix prompt), bottleneck adapters inside
transformer blocks (encoder prompt), or plain full fine-tuning. Ships with
a synthetic low-contrast micrograph generator and an experiment harness.
"""

from .tensor import (
    Tensor,
    ParameterStore,
    GradientReport,
    NonFiniteError,
    grad,
    finite_diff_check,
)
from .backbone import BackboneConfig, init_backbone, forward, count_params
from .strategies import Strategy, attach, trainable_params_of
from .training import TrainConfig, soft_dice, dice_loss, train, pretrain_backbone, freeze_verify
from .data import SyntheticConfig, Sample, generate, rasterize, save_image, load_image

__all__ = [
    "Tensor",
    "ParameterStore",
    "GradientReport",
    "NonFiniteError",
    "grad",
    "finite_diff_check",
    "BackboneConfig",
    "init_backbone",
    "forward",
    "count_params",
    "Strategy",
    "attach",
    "trainable_params_of",
    "TrainConfig",
    "soft_dice",
    "dice_loss",
    "train",
    "pretrain_backbone",
    "freeze_verify",
    "SyntheticConfig",
    "Sample",
    "generate",
    "rasterize",
    "save_image",
    "load_image",
]

__version__ = "0.1.0"
