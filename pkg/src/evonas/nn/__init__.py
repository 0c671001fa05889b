"""Minimal reverse-mode autodiff and layer kit."""
from .batch import Batch, LossValue
from .layers import forward_op, op_madds, op_param_shapes
from .optim import cosine_lr, sgd_step
from .params import ParamStore
from .tensor import Tensor, cross_entropy, no_grad

__all__ = [
    "Batch",
    "LossValue",
    "ParamStore",
    "Tensor",
    "cosine_lr",
    "cross_entropy",
    "forward_op",
    "no_grad",
    "op_madds",
    "op_param_shapes",
    "sgd_step",
]
