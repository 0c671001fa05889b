"""Datasets: CIFAR-10 binary batches, a synthetic grating task, seeded splits and a batch loader."""
from __future__ import annotations

import errno
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, CorruptFileError, DataError
from .nn.batch import Batch

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
# standard per-channel statistics of the CIFAR-10 training set (pixels in [0, 1])
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W float32
    labels: np.ndarray  # N int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} do not match")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


# ---------------------------------------------------------------- CIFAR-10

def read_cifar_file(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``uint8`` images ``(N, 3, 32, 32)`` and labels of one binary batch file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(errno.ENOENT, "CIFAR-10 batch file not found", str(path))
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise CorruptFileError(f"{path}: {raw.size} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: record {bad} has label {labels[bad]} > 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def normalize_cifar(raw: np.ndarray) -> np.ndarray:
    x = raw.astype(np.float32) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def load_cifar10(path: str | Path) -> tuple[Dataset, Dataset]:
    """``(train, test)`` from a directory holding the binary-version batch files."""
    path = Path(path)
    parts = [read_cifar_file(path / f) for f in CIFAR_TRAIN_FILES]
    test_x, test_y = read_cifar_file(path / CIFAR_TEST_FILE)
    train = Dataset(normalize_cifar(np.concatenate([p[0] for p in parts])), np.concatenate([p[1] for p in parts]))
    return train, Dataset(normalize_cifar(test_x), test_y)


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticImageTask:
    """Oriented sinusoidal gratings, one orientation/frequency/phase per class, plus Gaussian noise."""

    classes: int = 4
    samples: int = 2048
    image_size: int = 16
    channels: int = 1
    noise: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.samples < self.classes or self.image_size < 4 or self.channels < 1:
            raise ConfigError("samples >= classes, image_size >= 4 and channels >= 1 required")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    def pattern(self, c: int) -> np.ndarray:
        s = self.image_size
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        theta = np.pi * c / self.classes
        freq = (4.0 + (c % 2)) / s
        phase = 0.7 * c
        g = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        return np.repeat(g[None], self.channels, axis=0)


def generate_synthetic(task: SyntheticImageTask = SyntheticImageTask()) -> Dataset:
    """Balanced (as far as ``samples`` allows), shuffled and deterministic under ``task.seed``.

    Pixels are scaled by the expected standard deviation so inputs have roughly
    unit variance at any noise level.
    """
    rng = np.random.default_rng(task.seed)
    labels = np.arange(task.samples) % task.classes
    rng.shuffle(labels)
    base = np.stack([task.pattern(c) for c in range(task.classes)])
    noise = rng.standard_normal((task.samples, task.channels, task.image_size, task.image_size))
    scale = np.sqrt(0.5 + task.noise ** 2)
    return Dataset((base[labels] + task.noise * noise) / scale, labels)


# ---------------------------------------------------------------- splits / loading

def split_dataset(ds: Dataset, fractions: tuple[float, float] = (0.5, 0.5), seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded disjoint split into a weight-training part and an architecture-selection part."""
    a, b = fractions
    if a <= 0 or b <= 0 or abs(a + b - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(a * len(ds)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # or "cifar10"
    path: str | None = None
    synthetic: SyntheticImageTask = field(default_factory=SyntheticImageTask)
    split: tuple[float, float] = (0.5, 0.5)
    batch_size: int = 64
    flip: bool = False
    crop: bool = False

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "cifar10" and not self.path:
            raise ConfigError("cifar10 source needs a path")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        a, b = self.split
        if a <= 0 or b <= 0 or abs(a + b - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be positive and sum to 1, got {self.split}")

    def to_dict(self) -> dict:
        d = {"source": self.source, "split": list(self.split), "batch_size": self.batch_size,
             "flip": self.flip, "crop": self.crop}
        if self.path:
            d["path"] = self.path
        if self.source == "synthetic":
            d["synthetic"] = dict(vars(self.synthetic))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        syn = SyntheticImageTask(**d.pop("synthetic", {}))
        known = {"source", "path", "split", "batch_size", "flip", "crop"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown dataset keys {sorted(extra)}")
        return cls(synthetic=syn, **d)

    def load(self, seed: int) -> tuple[Dataset, Dataset]:
        """``(param_split, arch_split)``."""
        if self.source == "synthetic":
            full = generate_synthetic(self.synthetic)
        else:
            full, _ = load_cifar10(os.path.expanduser(self.path))
        return split_dataset(full, self.split, seed)


class DataLoader:
    """Shuffled mini-batches; every random draw comes from the ``rng`` passed to :meth:`epoch`."""

    def __init__(self, ds: Dataset, batch_size: int, flip: bool = False, crop: bool = False, pad: int = 2):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(ds) == 0:
            raise DataError("empty dataset")
        self.ds = ds
        self.batch_size = batch_size
        self.flip = flip
        self.crop = crop
        self.pad = pad

    def __len__(self) -> int:
        return -(-len(self.ds) // self.batch_size)

    def _augment(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.flip:
            f = rng.random(len(x)) < 0.5
            x = x.copy()
            x[f] = x[f, :, :, ::-1]
        if self.crop:
            p = self.pad
            h, w = x.shape[2:]
            padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            offs = rng.integers(0, 2 * p + 1, size=(len(x), 2))
            x = np.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offs)])
        return x

    def epoch(self, rng: np.random.Generator, shuffle: bool = True) -> Iterator[Batch]:
        order = rng.permutation(len(self.ds)) if shuffle else np.arange(len(self.ds))
        for i in range(0, len(order), self.batch_size):
            idx = order[i:i + self.batch_size]
            x = self.ds.images[idx]
            if self.flip or self.crop:
                x = self._augment(x, rng)
            yield Batch(x, self.ds.labels[idx])
