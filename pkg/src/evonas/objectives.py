"""Per-architecture measurements and the small-model-trap fitness simulator.

All objectives are minimized: validation error (1 - accuracy), parameter
count, multiply-adds and a lookup-table latency proxy.  The accuracy
increase speed is tracked separately through :class:`FitnessRecord`.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, StructuralError, UsageError
from .nn import tensor as T
from .nn.layers import op_madds
from .search_space import Genome, SpaceDescriptor, encode_mask, format_genome, validate_genome
from .supernet import SampledNet, SuperNet

OBJECTIVES = ("error", "params", "flops", "latency")


@dataclass(frozen=True)
class ObjectiveVector:
    values: tuple[float, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.values) != len(self.labels):
            raise StructuralError("values and labels differ in length")
        if len(self.values) < 2:
            raise StructuralError("need at least two objectives")
        if len(set(self.labels)) != len(self.labels):
            raise StructuralError(f"duplicate objective labels {self.labels}")
        if not all(np.isfinite(self.values)):
            raise StructuralError(f"non-finite objective values {self.values}")

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)


@dataclass
class FitnessRecord:
    genome_id: int
    params: int = 0
    flops: int = 0
    latency_ms: float = 0.0
    accuracy_history: list[tuple[int, float]] = field(default_factory=list)

    def add(self, generation: int, accuracy: float) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise DataError(f"accuracy {accuracy} outside [0, 1]")
        if self.accuracy_history and generation <= self.accuracy_history[-1][0]:
            raise UsageError(
                f"genome {self.genome_id}: generation {generation} not after {self.accuracy_history[-1][0]}")
        self.accuracy_history.append((int(generation), float(accuracy)))

    @property
    def accuracy(self) -> float:
        if not self.accuracy_history:
            raise UsageError(f"genome {self.genome_id} has no accuracy yet")
        return self.accuracy_history[-1][1]

    @property
    def error(self) -> float:
        return 1.0 - self.accuracy

    def objective(self, name: str) -> float:
        if name == "error":
            return self.error
        if name == "params":
            return float(self.params)
        if name == "flops":
            return float(self.flops)
        if name == "latency":
            return float(self.latency_ms)
        raise ConfigError(f"unknown objective {name!r}; choose from {OBJECTIVES}")

    def objectives(self, labels: Sequence[str]) -> ObjectiveVector:
        return ObjectiveVector(tuple(self.objective(n) for n in labels), tuple(labels))

    def to_dict(self) -> dict:
        return {"genome_id": self.genome_id, "params": self.params, "flops": self.flops,
                "latency_ms": self.latency_ms, "accuracy_history": [list(h) for h in self.accuracy_history]}

    @classmethod
    def from_dict(cls, d: dict) -> "FitnessRecord":
        return cls(int(d["genome_id"]), int(d["params"]), int(d["flops"]), float(d["latency_ms"]),
                   [(int(g), float(a)) for g, a in d["accuracy_history"]])


NEWCOMER_RULES = ("optimistic", "zero")


def accuracy_speed(rec: FitnessRecord, newcomer: str = "optimistic") -> float:
    """Accuracy gained between the two most recent evaluations.

    For a record with a single evaluation, ``newcomer="optimistic"`` returns
    that accuracy itself and ``"zero"`` returns 0.
    """
    h = rec.accuracy_history
    if not h:
        raise UsageError(f"genome {rec.genome_id}: empty accuracy history")
    if newcomer not in NEWCOMER_RULES:
        raise ConfigError(f"unknown newcomer rule {newcomer!r}; choose from {NEWCOMER_RULES}")
    if len(h) == 1:
        return h[0][1] if newcomer == "optimistic" else 0.0
    return h[-1][1] - h[-2][1]


# ---------------------------------------------------------------- accuracy

def _batches(images: np.ndarray, labels: np.ndarray, batch_size: int):
    for i in range(0, len(labels), batch_size):
        yield images[i:i + batch_size], labels[i:i + batch_size]


def evaluate_accuracy(s: SampledNet, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy over the full split, in order."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("empty validation set")
    correct = 0
    with T.no_grad():
        for xb, yb in _batches(images, labels, batch_size):
            correct += int((s.forward(xb).data.argmax(axis=1) == yb).sum())
    return correct / len(labels)


def evaluate_population(net: SuperNet, genomes: Sequence[Genome], images: np.ndarray, labels: np.ndarray,
                        batch_size: int = 128) -> np.ndarray:
    """Accuracy of every genome, sharing identical early computations across genomes.

    Produces exactly the values of per-genome :func:`evaluate_accuracy` calls
    with the same ``batch_size``.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("empty validation set")
    correct = np.zeros(len(genomes), dtype=np.int64)
    with T.no_grad():
        for xb, yb in _batches(images, labels, batch_size):
            cache: dict = {}
            for i, g in enumerate(genomes):
                correct[i] += int((net.forward(g, xb, cache).data.argmax(axis=1) == yb).sum())
    return correct / len(labels)


# ---------------------------------------------------------------- size / cost

def count_params(g: Genome, net: SuperNet) -> int:
    """Scalar weights at active slots."""
    return int((encode_mask(g, net.space).astype(np.int64) * net.slot_sizes).sum())


def _active_edges(g: Genome, space: SpaceDescriptor):
    """Yield ``(layer, node, pred, op_name, stride)`` for each distinct active edge op."""
    for layer in range(space.stack_depth):
        red = space.is_reduction(layer)
        cell = g.reduction if red else g.normal
        for j, node in enumerate(cell.nodes):
            for pred, op, _ in node.inputs():
                stride = 2 if red and pred < space.input_count else 1
                yield layer, j, pred, space.op_set[op], stride


def _resolutions(space: SpaceDescriptor, image_size: int) -> list[int]:
    sizes, s = [], image_size
    for layer in range(space.stack_depth):
        sizes.append(s)
        if space.is_reduction(layer):
            s = -(-s // 2)
    return sizes


def count_flops(g: Genome, net: SuperNet, input_shape: tuple[int, int, int]) -> int:
    """Multiply-adds of one forward pass on a ``(C, H, W)`` input (pools and skips count 0)."""
    validate_genome(g, net.space)
    cin, h, w = input_shape
    if h != w:
        raise StructuralError("square inputs only")
    c = net.space.stem_channels
    total = cin * c * 9 * h * w
    sizes = _resolutions(net.space, h)
    for layer, _, _, op, stride in _active_edges(g, net.space):
        out = -(-sizes[layer] // stride)
        total += op_madds(op, c, out, out)
    total += c * net.num_classes
    return int(total)


@dataclass
class LatencyLUT:
    """Milliseconds per edge op keyed ``"op/stage/channels"`` plus a fixed overhead.

    ``stage`` is ``normal<r>`` for stride-1 edges reading resolution level
    ``r`` and ``reduce<r>`` for stride-2 edges reading level ``r``.
    """

    entries: dict[str, float]
    overhead_ms: float = 0.0

    def __post_init__(self):
        bad = {k: v for k, v in self.entries.items() if not v >= 0}
        if bad or self.overhead_ms < 0:
            raise ConfigError(f"latency entries must be >= 0: {bad or self.overhead_ms}")

    @staticmethod
    def key(op: str, stage: str, channels: int) -> str:
        return f"{op}/{stage}/{channels}"

    def lookup(self, op: str, stage: str, channels: int) -> float:
        k = self.key(op, stage, channels)
        try:
            return self.entries[k]
        except KeyError:
            raise ConfigError(f"latency table has no entry {k!r}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"overhead_ms": self.overhead_ms, "entries": self.entries},
                                         indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "LatencyLUT":
        d = json.loads(Path(path).read_text())
        if "entries" in d:
            return cls({k: float(v) for k, v in d["entries"].items()}, float(d.get("overhead_ms", 0.0)))
        return cls({k: float(v) for k, v in d.items()})


def edge_stages(space: SpaceDescriptor) -> list[str]:
    """Every stage name that occurs in ``space``."""
    level, names = 0, []
    for layer in range(space.stack_depth):
        if space.is_reduction(layer):
            names += [f"reduce{level}", f"normal{level + 1}"]
            level += 1
        else:
            names.append(f"normal{level}")
    return sorted(set(names))


def _edge_stage(space: SpaceDescriptor, layer: int, stride: int) -> str:
    level = sum(1 for r in space.reduction_positions if r < layer)
    if stride == 2:
        return f"reduce{level}"
    return f"normal{level + 1}" if space.is_reduction(layer) else f"normal{level}"


# synthetic per-op launch cost (ms); the remainder scales with multiply-adds
_LAUNCH_MS = {"conv3x3": 0.05, "conv1x1": 0.03, "sepconv3x3": 0.08, "sepconv5x5": 0.1,
              "maxpool3x3": 0.02, "avgpool3x3": 0.02, "skip": 0.005, "none": 0.0}
_MS_PER_MADD = 2e-7


def default_lut(space: SpaceDescriptor, image_size: int, overhead_ms: float = 1.0) -> LatencyLUT:
    """Synthetic table: a per-op launch cost plus ``2e-7`` ms per multiply-add.

    Stride-2 ``skip`` gets three launches (slice, slice, concat).
    """
    c = space.stem_channels
    entries = {}
    for stage in edge_stages(space):
        level = int(stage.lstrip("normalreduce"))
        size = image_size
        for _ in range(level):
            size = -(-size // 2)
        out = -(-size // 2) if stage.startswith("reduce") else size
        for op in space.op_set:
            ms = _LAUNCH_MS[op] + _MS_PER_MADD * op_madds(op, c, out, out)
            if op == "skip" and stage.startswith("reduce"):
                ms = 3 * _LAUNCH_MS["skip"]
            entries[LatencyLUT.key(op, stage, c)] = round(ms, 9)
    return LatencyLUT(entries, overhead_ms)


def latency_proxy(g: Genome, lut: LatencyLUT, space: SpaceDescriptor) -> float:
    """Fixed overhead plus the table entry of every distinct active edge op."""
    validate_genome(g, space)
    total = lut.overhead_ms
    for layer, _, _, op, stride in _active_edges(g, space):
        total += lut.lookup(op, _edge_stage(space, layer, stride), space.stem_channels)
    return float(total)


# ---------------------------------------------------------------- small-model trap

# three reference model sizes and their converged accuracies
REF_SIZES = (2.1e6, 2.9e6, 3.6e6)
REF_FINAL_ACC = (0.9687, 0.9717, 0.9720)


@dataclass(frozen=True)
class TrapCurveModel:
    """Saturating accuracy curve ``final_acc * (1 - exp(-rate * e)) + noise``."""

    size: float
    final_acc: float
    convergence_rate: float
    noise_amp: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.final_acc < 1:
            raise ConfigError("final_acc must lie in (0, 1)")
        if not self.convergence_rate > 0:
            raise ConfigError("convergence_rate must be positive")
        if self.noise_amp < 0:
            raise ConfigError("noise_amp must be non-negative")

    def noise(self, epoch: float) -> float:
        if self.noise_amp == 0:
            return 0.0
        return float(np.random.default_rng([self.seed, int(round(epoch * 1000))]).standard_normal())

    def accuracy(self, epoch: float) -> float:
        acc = self.final_acc * (1.0 - np.exp(-self.convergence_rate * epoch)) + self.noise_amp * self.noise(epoch)
        return float(np.clip(acc, 0.0, 1.0))


def simulate_trap_curves(models: Sequence[TrapCurveModel], epochs: int) -> np.ndarray:
    """``(len(models), epochs)`` accuracies at epochs ``1..epochs``."""
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    return np.array([[m.accuracy(e) for e in range(1, epochs + 1)] for m in models])


@dataclass
class TrapOracle:
    """Stand-in for SuperNet evaluation where accuracy depends only on model size and training time.

    Parameter counts of the search space are mapped linearly onto the
    reference size range and interpolated against the reference final
    accuracies; convergence rate falls geometrically from ``rate_small`` to
    ``rate_large`` with size.  Each architecture gets its own noise stream.
    """

    min_params: float
    max_params: float
    rate_small: float = 0.1
    rate_large: float = 0.02
    noise_amp: float = 0.003
    seed: int = 0
    sizes: tuple[float, ...] = REF_SIZES
    finals: tuple[float, ...] = REF_FINAL_ACC

    def model_for(self, params: float, key: str) -> TrapCurveModel:
        span = max(self.max_params - self.min_params, 1.0)
        u = float(np.clip((params - self.min_params) / span, 0.0, 1.0))
        size = self.sizes[0] + u * (self.sizes[-1] - self.sizes[0])
        final = float(np.interp(size, self.sizes, self.finals))
        rate = self.rate_small * (self.rate_large / self.rate_small) ** u
        seed = zlib.crc32(f"{self.seed}:{key}".encode())
        return TrapCurveModel(size, final, rate, self.noise_amp, seed)

    def accuracy(self, params: float, key: str, epoch: float) -> float:
        return self.model_for(params, key).accuracy(epoch)

    @classmethod
    def for_space(cls, net: SuperNet, **kw) -> "TrapOracle":
        """Bounds from the smallest (all parameter-free) and largest possible genome."""
        sizes = net.slot_sizes
        space = net.space
        lo = int(sizes[0] + sizes[-1])
        hi = lo
        for layer in range(space.stack_depth):
            for j in range(space.node_count):
                best = []
                for p in range(space.input_count + j):
                    for k in range(space.num_ops):
                        best.append(int(sizes[net.slot_index(layer, j, p, k)]))
                best.sort(reverse=True)
                hi += best[0] + best[1]
        return cls(float(lo), float(hi), **kw)


def genome_key(g: Genome, space: SpaceDescriptor) -> str:
    return format_genome(g, space)


def objective_matrix(records: Iterable[FitnessRecord], labels: Sequence[str]) -> np.ndarray:
    return np.array([[r.objective(n) for n in labels] for r in records], dtype=np.float64)
