"""Tensor autodiff, MLP classifier and losses."""

from .losses import kl_divergence, log_prob_of, log_softmax, softmax_xent, xent_per_sample
from .model import (
    Arch,
    LayoutEntry,
    MlpModel,
    ParamVector,
    backward,
    flatten,
    forward_logits,
    grads_from_leaves,
    unflatten,
)
from .tensor import Tensor, grad, no_grad, set_debug

__all__ = [
    "Arch",
    "LayoutEntry",
    "MlpModel",
    "ParamVector",
    "Tensor",
    "backward",
    "flatten",
    "forward_logits",
    "grad",
    "grads_from_leaves",
    "kl_divergence",
    "log_prob_of",
    "log_softmax",
    "no_grad",
    "set_debug",
    "softmax_xent",
    "unflatten",
    "xent_per_sample",
]
