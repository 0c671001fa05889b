"""Candidate operations of a cell edge, built from the tensor primitives."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import StructuralError
from . import tensor as T
from .tensor import Tensor


def op_param_shapes(kind: str, channels: int) -> dict[str, tuple[int, ...]]:
    """Parameter tensors owned by one instance of ``kind`` on a ``channels``-wide edge."""
    c = channels
    if kind == "conv3x3":
        return {"w": (c, c, 3, 3)}
    if kind == "conv1x1":
        return {"w": (c, c, 1, 1)}
    if kind == "sepconv3x3":
        return {"dw": (c, 1, 3, 3), "pw": (c, c, 1, 1)}
    if kind == "sepconv5x5":
        return {"dw": (c, 1, 5, 5), "pw": (c, c, 1, 1)}
    if kind in ("maxpool3x3", "avgpool3x3", "skip", "none"):
        return {}
    raise StructuralError(f"unknown op {kind!r}")


def op_madds(kind: str, channels: int, h_out: int, w_out: int) -> int:
    """Multiply-adds of one op instance producing an ``h_out x w_out`` map."""
    c = channels
    hw = h_out * w_out
    if kind == "conv3x3":
        return c * c * 9 * hw
    if kind == "conv1x1":
        return c * c * hw
    if kind == "sepconv3x3":
        return c * 9 * hw + c * c * hw
    if kind == "sepconv5x5":
        return c * 25 * hw + c * c * hw
    return 0


def init_op_params(kind: str, params: Mapping[str, np.ndarray], rng: np.random.Generator) -> None:
    """He-normal kernels, zero biases, written in place."""
    for name, arr in params.items():
        if name == "b":
            arr[...] = 0
        elif kind == "linear":
            arr[...] = rng.standard_normal(arr.shape) / np.sqrt(arr.shape[1])
        else:
            fan_in = int(np.prod(arr.shape[1:]))
            arr[...] = rng.standard_normal(arr.shape) * np.sqrt(2.0 / fan_in)


def forward_op(kind: str, x: Tensor, params: Mapping[str, Tensor], stride: int = 1) -> Tensor:
    """Apply one candidate operation.

    Weighted ops run conv -> per-sample standardization -> ReLU, so every
    architecture feeds the shared classifier features of the same scale.
    Stride-1 ops keep the spatial size; stride 2 halves it (rounding up).
    ``skip`` at stride 2 is a parameter-free factorized reduce.
    """
    if x.data.ndim != 4:
        raise StructuralError(f"expected NCHW input, got shape {x.shape}")
    if stride not in (1, 2):
        raise StructuralError(f"stride must be 1 or 2, got {stride}")
    if kind in ("conv3x3", "conv1x1"):
        k = 3 if kind == "conv3x3" else 1
        w = params["w"]
        if w.shape[1] != x.shape[1]:
            raise StructuralError(f"{kind}: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
        return T.relu(T.sample_norm(T.conv2d(x, w, None, stride=stride, padding=k // 2)))
    if kind in ("sepconv3x3", "sepconv5x5"):
        k = 3 if kind == "sepconv3x3" else 5
        c = x.shape[1]
        if params["dw"].shape[0] != c:
            raise StructuralError(f"{kind}: input has {c} channels, kernel expects {params['dw'].shape[0]}")
        h = T.conv2d(x, params["dw"], None, stride=stride, padding=k // 2, groups=c)
        return T.relu(T.sample_norm(T.conv2d(h, params["pw"], None)))
    if kind == "maxpool3x3":
        return T.max_pool2d(x, 3, stride, 1)
    if kind == "avgpool3x3":
        return T.avg_pool2d(x, 3, stride, 1)
    if kind == "skip":
        return x if stride == 1 else T.factorized_reduce(x)
    if kind == "none":
        n, c, h, w = x.shape
        return T.zeros((n, c, -(-h // stride), -(-w // stride)))
    raise StructuralError(f"unknown op {kind!r}")
