from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass
class Batch:
    inputs: np.ndarray  # N x C x H x W, float32
    targets: np.ndarray  # N, int64

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise DataError(f"inputs must be NCHW, got shape {self.inputs.shape}")
        if len(self.inputs) < 1 or len(self.inputs) != len(self.targets):
            raise DataError("batch needs N >= 1 inputs with one label each")

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class LossValue:
    value: float
    correct_count: int
