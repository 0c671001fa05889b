"""Cell-based architecture space, genome encoding and genetic operators.

An architecture is a pair of cells (normal and reduction).  Each cell has
``input_count`` inputs (outputs of the preceding cells) followed by
``node_count`` intermediate nodes.  Node ``j`` reads two earlier states,
applies one operation to each and sums the results, so a cell is a DAG and
a genome is a short list of ``(pred_a, pred_b, op_a, op_b)`` tuples.

The binary connection mask lays out one slot per ``(layer, node, pred, op)``
of the SuperNet plus the always-active stem and classifier slots.  Slots of
parameter-free operations exist in the mask but own zero weights.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, StructuralError

OP_NAMES = (
    "conv3x3",
    "conv1x1",
    "sepconv3x3",
    "sepconv5x5",
    "maxpool3x3",
    "avgpool3x3",
    "skip",
    "none",
)
PARAMETER_FREE = frozenset({"maxpool3x3", "avgpool3x3", "skip", "none"})

FULL_OPS = OP_NAMES
DESK_OPS = ("conv3x3", "conv1x1", "sepconv3x3", "maxpool3x3", "skip", "none")

CROSSOVER_RATIO = 0.25
MUTATION_RATIO = 0.25
RANDOM_RATIO = 0.5
NODE_SWAP_RATE = 0.5


@dataclass(frozen=True)
class OpKind:
    id: int
    name: str

    @property
    def has_params(self) -> bool:
        return self.name not in PARAMETER_FREE


class NodeGene(NamedTuple):
    pred_a: int
    pred_b: int
    op_a: int
    op_b: int

    def canonical(self) -> "NodeGene":
        # (pred, op) pairs sorted lexicographically
        if (self.pred_a, self.op_a) <= (self.pred_b, self.op_b):
            return self
        return NodeGene(self.pred_b, self.pred_a, self.op_b, self.op_a)

    def inputs(self) -> list[tuple[int, int, int]]:
        """Distinct ``(pred, op, multiplicity)`` triples."""
        a = (self.pred_a, self.op_a)
        b = (self.pred_b, self.op_b)
        if a == b:
            return [(a[0], a[1], 2)]
        return [(a[0], a[1], 1), (b[0], b[1], 1)]


@dataclass(frozen=True)
class CellGenome:
    nodes: tuple[NodeGene, ...]

    @property
    def node_count(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class Genome:
    normal: CellGenome
    reduction: CellGenome
    id: int = field(default=-1, compare=False)
    origin: str = field(default="random", compare=False)

    def with_id(self, new_id: int, origin: str | None = None) -> "Genome":
        return Genome(self.normal, self.reduction, new_id, origin or self.origin)

    def key(self) -> tuple:
        """Hashable identity of the architecture, ignoring id and origin."""
        return (self.normal.nodes, self.reduction.nodes)

    def to_text(self, space: "SpaceDescriptor") -> str:
        return format_genome(self, space)


@dataclass(frozen=True)
class SpaceDescriptor:
    op_set: tuple[str, ...] = DESK_OPS
    node_count: int = 4
    input_count: int = 2
    stack_depth: int = 5
    reduction_positions: tuple[int, ...] = (2,)
    stem_channels: int = 8

    def __post_init__(self):
        object.__setattr__(self, "op_set", tuple(self.op_set))
        object.__setattr__(self, "reduction_positions", tuple(sorted(set(self.reduction_positions))))
        self.validate()

    def validate(self) -> None:
        if len(self.op_set) < 2 or "none" not in self.op_set:
            raise ConfigError("op set needs at least two ops including 'none'")
        if len(set(self.op_set)) != len(self.op_set):
            raise ConfigError(f"duplicate ops in {self.op_set}")
        unknown = [o for o in self.op_set if o not in OP_NAMES]
        if unknown:
            raise ConfigError(f"unknown ops {unknown}")
        if self.node_count < 1 or self.input_count < 1:
            raise ConfigError("node_count and input_count must be >= 1")
        if self.stem_channels <= 0:
            raise ConfigError("stem_channels must be positive")
        if not all(0 <= r < self.stack_depth for r in self.reduction_positions):
            raise ConfigError(f"reduction positions {self.reduction_positions} outside [0, {self.stack_depth})")
        # both cell kinds must be instantiated or the mask cannot encode them
        if not self.reduction_positions or len(self.reduction_positions) == self.stack_depth:
            raise ConfigError("stack needs at least one normal and one reduction layer")

    @property
    def ops(self) -> list[OpKind]:
        return [OpKind(i, n) for i, n in enumerate(self.op_set)]

    @property
    def num_ops(self) -> int:
        return len(self.op_set)

    def op_id(self, name: str) -> int:
        try:
            return self.op_set.index(name)
        except ValueError:
            raise StructuralError(f"op {name!r} not in space {self.op_set}") from None

    def is_reduction(self, layer: int) -> bool:
        return layer in self.reduction_positions

    def to_dict(self) -> dict:
        return {
            "op_set": list(self.op_set),
            "node_count": self.node_count,
            "input_count": self.input_count,
            "stack_depth": self.stack_depth,
            "reduction_positions": list(self.reduction_positions),
            "stem_channels": self.stem_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceDescriptor":
        return cls(
            op_set=tuple(d.get("op_set", DESK_OPS)),
            node_count=int(d.get("node_count", 4)),
            input_count=int(d.get("input_count", 2)),
            stack_depth=int(d.get("stack_depth", 5)),
            reduction_positions=tuple(d.get("reduction_positions", (2,))),
            stem_channels=int(d.get("stem_channels", 8)),
        )


# ---------------------------------------------------------------- validity

def validate_node(node: NodeGene, position: int, space: SpaceDescriptor) -> None:
    limit = position + space.input_count
    for p in (node.pred_a, node.pred_b):
        if not 0 <= p < limit:
            raise StructuralError(f"node {position}: predecessor {p} outside [0, {limit})")
    for o in (node.op_a, node.op_b):
        if not 0 <= o < space.num_ops:
            raise StructuralError(f"node {position}: op id {o} outside [0, {space.num_ops})")
    if node.canonical() != node:
        raise StructuralError(f"node {position} not in canonical form: {node}")


def validate_genome(g: Genome, space: SpaceDescriptor) -> None:
    for cell in (g.normal, g.reduction):
        if cell.node_count != space.node_count:
            raise StructuralError(f"cell has {cell.node_count} nodes, space expects {space.node_count}")
        for j, node in enumerate(cell.nodes):
            validate_node(node, j, space)


def is_valid(g: Genome, space: SpaceDescriptor) -> bool:
    try:
        validate_genome(g, space)
    except StructuralError:
        return False
    return True


# ---------------------------------------------------------------- operators

def random_node(position: int, space: SpaceDescriptor, rng: np.random.Generator) -> NodeGene:
    n_pred = position + space.input_count
    pa, pb = rng.integers(0, n_pred, size=2)
    oa, ob = rng.integers(0, space.num_ops, size=2)
    return NodeGene(int(pa), int(pb), int(oa), int(ob)).canonical()


def random_cell(space: SpaceDescriptor, rng: np.random.Generator) -> CellGenome:
    return CellGenome(tuple(random_node(j, space, rng) for j in range(space.node_count)))


def random_genome(space: SpaceDescriptor, rng: np.random.Generator, genome_id: int = -1) -> Genome:
    """Uniform draw of every predecessor and op over the legal values."""
    normal = random_cell(space, rng)
    reduction = random_cell(space, rng)
    return Genome(normal, reduction, genome_id, "random")


def _check_same_shape(a: Genome, b: Genome) -> None:
    if a.normal.node_count != b.normal.node_count or a.reduction.node_count != b.reduction.node_count:
        raise StructuralError("parents come from different search spaces")


def crossover(a: Genome, b: Genome, rng: np.random.Generator, rate: float = NODE_SWAP_RATE) -> Genome:
    """Per-node uniform crossover; each node comes from ``b`` with probability ``rate``."""
    _check_same_shape(a, b)

    def mix(ca: CellGenome, cb: CellGenome) -> CellGenome:
        take_b = rng.random(ca.node_count) < rate
        return CellGenome(tuple(nb if t else na for na, nb, t in zip(ca.nodes, cb.nodes, take_b)))

    return Genome(mix(a.normal, b.normal), mix(a.reduction, b.reduction), -1, "crossover")


def mutate(a: Genome, rng: np.random.Generator, space: SpaceDescriptor, rate: float = NODE_SWAP_RATE) -> Genome:
    """Reassign each node to a fresh random NodeGene with probability ``rate``."""

    def mut(cell: CellGenome) -> CellGenome:
        redraw = rng.random(cell.node_count) < rate
        nodes = []
        for j, (node, r) in enumerate(zip(cell.nodes, redraw)):
            nodes.append(random_node(j, space, rng) if r else node)
        return CellGenome(tuple(nodes))

    return Genome(mut(a.normal), mut(a.reduction), -1, "mutation")


def generate_offspring(
    population: Sequence[Genome],
    t: int,
    rng: np.random.Generator,
    space: SpaceDescriptor,
    start_id: int,
    ratios: tuple[float, float, float] = (CROSSOVER_RATIO, MUTATION_RATIO, RANDOM_RATIO),
) -> list[Genome]:
    """Produce ``t * len(population)`` children with ids ``start_id, start_id+1, ...``.

    Each child is a crossover of two uniformly drawn parents, a mutation of one
    parent or a fresh random genome, chosen with probabilities ``ratios``.
    """
    if t < 1:
        raise ConfigError(f"offspring expand ratio t must be >= 1, got {t}")
    if not population:
        raise ConfigError("cannot breed from an empty population")
    p_cross, p_mut, p_rand = ratios
    if min(ratios) < 0 or abs(p_cross + p_mut + p_rand - 1.0) > 1e-9:
        raise ConfigError(f"operator ratios must be non-negative and sum to 1, got {ratios}")
    n = len(population)
    children = []
    for k in range(t * n):
        u = rng.random()
        if u < p_cross:
            i, j = rng.integers(0, n, size=2)
            child = crossover(population[i], population[j], rng)
        elif u < p_cross + p_mut:
            child = mutate(population[rng.integers(0, n)], rng, space)
        else:
            child = random_genome(space, rng)
        children.append(child.with_id(start_id + k))
    return children


# ---------------------------------------------------------------- mask layout

@dataclass(frozen=True)
class ConnectionSlot:
    """One entry of the connection mask."""

    layer: int  # -1 for stem / classifier
    node: int
    pred: int
    op: int
    name: str


def connection_slots(space: SpaceDescriptor) -> list[ConnectionSlot]:
    """Ordered slot layout; a pure function of ``space``."""
    slots = [ConnectionSlot(-1, -1, -1, -1, "stem")]
    for layer in range(space.stack_depth):
        for j in range(space.node_count):
            for p in range(space.input_count + j):
                for k, op in enumerate(space.op_set):
                    slots.append(ConnectionSlot(layer, j, p, k, f"L{layer}.n{j}.p{p}.{op}"))
    slots.append(ConnectionSlot(-1, -1, -1, -1, "classifier"))
    return slots


def _layer_block(space: SpaceDescriptor) -> int:
    K = space.num_ops
    return K * sum(space.input_count + j for j in range(space.node_count))


def _slot_index(space: SpaceDescriptor, layer: int, node: int, pred: int, op: int) -> int:
    K = space.num_ops
    before_node = sum(space.input_count + i for i in range(node))
    return 1 + layer * _layer_block(space) + (before_node + pred) * K + op


def mask_length(space: SpaceDescriptor) -> int:
    return 2 + space.stack_depth * _layer_block(space)


def encode_mask(g: Genome, space: SpaceDescriptor) -> np.ndarray:
    validate_genome(g, space)
    mask = np.zeros(mask_length(space), dtype=np.uint8)
    mask[0] = 1
    mask[-1] = 1
    for layer in range(space.stack_depth):
        cell = g.reduction if space.is_reduction(layer) else g.normal
        for j, node in enumerate(cell.nodes):
            mask[_slot_index(space, layer, j, node.pred_a, node.op_a)] = 1
            mask[_slot_index(space, layer, j, node.pred_b, node.op_b)] = 1
    return mask


def _decode_layer(mask: np.ndarray, space: SpaceDescriptor, layer: int) -> CellGenome:
    K = space.num_ops
    nodes = []
    for j in range(space.node_count):
        n_pred = space.input_count + j
        start = _slot_index(space, layer, j, 0, 0)
        block = mask[start:start + n_pred * K]
        on = np.flatnonzero(block)
        if len(on) == 1:
            p, o = divmod(int(on[0]), K)
            nodes.append(NodeGene(p, p, o, o))
        elif len(on) == 2:
            (pa, oa), (pb, ob) = (divmod(int(x), K) for x in on)
            nodes.append(NodeGene(pa, pb, oa, ob).canonical())
        else:
            raise StructuralError(f"layer {layer} node {j}: {len(on)} active connections, expected 1 or 2")
    return CellGenome(tuple(nodes))


def decode_mask(mask: np.ndarray, space: SpaceDescriptor) -> Genome:
    mask = np.asarray(mask)
    if mask.shape != (mask_length(space),):
        raise StructuralError(f"mask length {mask.shape} does not match space ({mask_length(space)})")
    if mask[0] != 1 or mask[-1] != 1:
        raise StructuralError("stem/classifier slots must be active")
    cells = {}
    for layer in range(space.stack_depth):
        kind = "reduction" if space.is_reduction(layer) else "normal"
        cell = _decode_layer(mask, space, layer)
        if kind in cells and cells[kind] != cell:
            raise StructuralError(f"layer {layer} disagrees with earlier {kind} layers")
        cells[kind] = cell
    return Genome(cells["normal"], cells["reduction"])


# ---------------------------------------------------------------- text form

def _format_cell(cell: CellGenome, space: SpaceDescriptor) -> str:
    parts = [f"({n.pred_a},{n.pred_b},{space.op_set[n.op_a]},{space.op_set[n.op_b]})" for n in cell.nodes]
    return "[" + ";".join(parts) + "]"


def format_genome(g: Genome, space: SpaceDescriptor) -> str:
    """``normal=[(p,p,op,op);...] reduce=[(...)]``"""
    return f"normal={_format_cell(g.normal, space)} reduce={_format_cell(g.reduction, space)}"


_NODE_RE = re.compile(r"\(\s*(\d+)\s*,\s*(\d+)\s*,\s*(\w+)\s*,\s*(\w+)\s*\)")
_LINE_RE = re.compile(r"^\s*normal=\[(.*)\]\s+reduce=\[(.*)\]\s*$")


def parse_genome(text: str, space: SpaceDescriptor, genome_id: int = -1) -> Genome:
    m = _LINE_RE.match(text)
    if not m:
        raise StructuralError(f"cannot parse genome line: {text!r}")
    cells = []
    for body in m.groups():
        nodes = []
        for item in filter(None, (s.strip() for s in body.split(";"))):
            nm = _NODE_RE.fullmatch(item)
            if not nm:
                raise StructuralError(f"bad node {item!r}")
            pa, pb, oa, ob = nm.groups()
            nodes.append(NodeGene(int(pa), int(pb), space.op_id(oa), space.op_id(ob)))
        cells.append(CellGenome(tuple(nodes)))
    g = Genome(cells[0], cells[1], genome_id, "parsed")
    validate_genome(g, space)
    return g
