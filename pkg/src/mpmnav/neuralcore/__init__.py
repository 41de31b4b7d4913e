"""Minimal float64 differentiable-computation engine."""

from .gradcheck import gradient_check
from .nn import cross_entropy, feed_forward, layer_norm, linear, multi_head_attention, softmax
from .params import (
    CheckpointError,
    NonFiniteGradient,
    ParameterStore,
    adamw_step,
    grad_norm,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import ShapeError, Tensor, backward, no_grad

__all__ = [
    "CheckpointError",
    "NonFiniteGradient",
    "ParameterStore",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "backward",
    "cross_entropy",
    "feed_forward",
    "grad_norm",
    "gradient_check",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "multi_head_attention",
    "no_grad",
    "save_checkpoint",
    "softmax",
]
