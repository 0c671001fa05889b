"""SGD with momentum and weight decay over a ParamStore."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError
from .params import ParamStore


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
             clip_norm: float | None = None) -> None:
    """``v <- momentum*v + grad + weight_decay*w``; ``w <- w - lr*v``; then zero grads.

    With ``clip_norm`` the gradient is first rescaled so its global L2 norm
    is at most ``clip_norm``.

    Only slots reached by a backward pass since the last step are updated, so
    weights (and velocities) of operations no sampled architecture used stay
    frozen.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if momentum < 0 or weight_decay < 0:
        raise ConfigError("momentum and weight decay must be non-negative")
    if clip_norm is not None and not clip_norm > 0:
        raise ConfigError(f"clip_norm must be positive, got {clip_norm}")
    m = store.touched_mask()
    if m.any():
        w = store.data[m]
        g = store.grad[m]
        if clip_norm is not None:
            norm = float(np.sqrt(np.dot(g.astype(np.float64), g)))
            if norm > clip_norm:
                g = g * np.float32(clip_norm / norm)
        v = momentum * store.momentum[m] + g + weight_decay * w
        store.momentum[m] = v
        store.data[m] = w - lr * v
    store.zero_grad()


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr_max`` at epoch 0 to ``lr_min`` at ``total_epochs``."""
    if total_epochs <= 0:
        return lr_max
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))
