"""Shared-weight SuperNet, masked sub-networks and the weight-gradient estimators.

Every ``(layer, node, pred, op)`` connection that owns weights has its own
ParamStore slot; a genome selects a subset of slots and the sampled network
only ever reads (and therefore only ever produces gradient for) those slots.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, StructuralError, UsageError
from .nn import tensor as T
from .nn.batch import Batch, LossValue
from .nn.layers import forward_op, init_op_params, op_param_shapes
from .nn.params import ParamStore
from .nn.tensor import Tensor
from .search_space import (
    Genome,
    SpaceDescriptor,
    connection_slots,
    encode_mask,
    validate_genome,
)


def stem_shapes(in_channels: int, channels: int) -> dict[str, tuple[int, ...]]:
    return {"w": (channels, in_channels, 3, 3)}


def classifier_shapes(channels: int, num_classes: int) -> dict[str, tuple[int, ...]]:
    return {"w": (num_classes, channels), "b": (num_classes,)}


class SuperNet:
    """All candidate operations of a cell stack over one ParamStore.

    Channels stay at ``space.stem_channels`` through the whole stack; reduction
    layers halve the spatial size.  Cell inputs are the outputs of the
    previous ``input_count`` layers (the stem output stands in for missing
    ones), aligned to the newest input by parameter-free factorized reduces.
    A cell outputs the mean of its intermediate nodes.  The last cell output
    is standardized per sample before pooling so that the shared classifier
    sees features on one scale whatever the architecture.
    """

    def __init__(self, space: SpaceDescriptor, num_classes: int, in_channels: int = 1,
                 rng: np.random.Generator | int | None = 0):
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        self.space = space
        self.num_classes = num_classes
        self.in_channels = in_channels
        c = space.stem_channels

        self.conn = connection_slots(space)
        specs: list[tuple[str, tuple[int, ...]]] = []
        self.conn_params: list[dict[str, str]] = []
        for slot in self.conn:
            if slot.name == "stem":
                shapes = stem_shapes(in_channels, c)
            elif slot.name == "classifier":
                shapes = classifier_shapes(c, num_classes)
            else:
                shapes = op_param_shapes(space.op_set[slot.op], c)
            names = {p: f"{slot.name}.{p}" for p in shapes}
            specs.extend((names[p], shapes[p]) for p in shapes)
            self.conn_params.append(names)
        self.store = ParamStore(specs)
        # store slots were registered in connection order, so ranges are contiguous
        starts, stops = [], []
        for names in self.conn_params:
            if names:
                first = self.store.spec(next(iter(names.values())))
                last = self.store.spec(list(names.values())[-1])
                starts.append(first.start)
                stops.append(last.stop)
            else:
                pos = stops[-1] if stops else 0
                starts.append(pos)
                stops.append(pos)
        self.conn_start = np.array(starts, dtype=np.int64)
        self.conn_stop = np.array(stops, dtype=np.int64)
        self._index = {(s.layer, s.node, s.pred, s.op): i for i, s in enumerate(self.conn)}
        self.cache_depth = 1
        self.initialize(rng)

    # ------------------------------------------------------------ layout

    @property
    def slot_sizes(self) -> np.ndarray:
        return self.conn_stop - self.conn_start

    @property
    def num_slots(self) -> int:
        return len(self.conn)

    def slot_index(self, layer: int, node: int, pred: int, op: int) -> int:
        return self._index[(layer, node, pred, op)]

    def initialize(self, rng: np.random.Generator | int | None) -> None:
        rng = np.random.default_rng(rng)
        for slot, names in zip(self.conn, self.conn_params):
            kind = "linear" if slot.name == "classifier" else slot.name
            init_op_params(kind, {p: self.store.view(n) for p, n in names.items()}, rng)
        self.store.momentum[:] = 0
        self.store.zero_grad()

    def param_mask(self, mask: np.ndarray) -> np.ndarray:
        """Expand a connection mask to a flat boolean mask over ``store.data``."""
        return np.repeat(np.asarray(mask, dtype=bool), self.slot_sizes)

    def params_of(self, slot: int) -> dict[str, Tensor]:
        return {p: self.store.tensor(n) for p, n in self.conn_params[slot].items()}

    def channel_plan(self, image_size: int) -> list[dict]:
        """Per-layer input/output resolution."""
        size = image_size
        plan = []
        for layer in range(self.space.stack_depth):
            red = self.space.is_reduction(layer)
            out = -(-size // 2) if red else size
            plan.append({"layer": layer, "reduction": red, "channels": self.space.stem_channels,
                         "in_size": size, "out_size": out})
            size = out
        return plan

    # ------------------------------------------------------------ forward

    def sample(self, genome: Genome) -> "SampledNet":
        validate_genome(genome, self.space)
        return SampledNet(genome, encode_mask(genome, self.space), self)

    def _cell(self, layer: int, genome: Genome, inputs: Sequence[tuple[Tensor, tuple]],
              cache: dict | None) -> tuple[Tensor, tuple]:
        space = self.space
        reduce = space.is_reduction(layer)
        cell = genome.reduction if reduce else genome.normal
        use_cache = cache is not None and layer < self.cache_depth
        states = list(inputs)
        n, c, h, w = states[-1][0].shape
        out_shape = (n, c, -(-h // 2), -(-w // 2)) if reduce else (n, c, h, w)
        outs = []
        for j, node in enumerate(cell.nodes):
            terms, term_keys = [], []
            for pred, op, mult in node.inputs():
                name = space.op_set[op]
                if name == "none":
                    continue
                stride = 2 if reduce and pred < space.input_count else 1
                slot = self.slot_index(layer, j, pred, op)
                x, xkey = states[pred]
                key = (slot, xkey)
                y = cache.get(key) if use_cache else None
                if y is None:
                    y = forward_op(name, x, self.params_of(slot), stride)
                    if use_cache:
                        cache[key] = y
                terms.append(y if mult == 1 else T.scale(y, 2.0))
                term_keys.append((key, mult))
            nkey = ("node", tuple(term_keys), out_shape)
            h_node = cache.get(nkey) if use_cache else None
            if h_node is None:
                h_node = T.add_n(terms) if terms else T.zeros(out_shape)
                if use_cache:
                    cache[nkey] = h_node
            states.append((h_node, nkey))
            outs.append(states[-1])
        ckey = ("cell", layer, tuple(k for _, k in outs))
        out = cache.get(ckey) if use_cache else None
        if out is None:
            out = T.scale(T.add_n([t for t, _ in outs]), 1.0 / len(outs))
            if use_cache:
                cache[ckey] = out
        return out, ckey

    def forward(self, genome: Genome, x: np.ndarray | Tensor, cache: dict | None = None) -> Tensor:
        """Logits of ``genome`` on ``x``.

        ``cache`` (inference only) memoizes intermediate results by the
        computation that produced them, so architectures sharing early
        operations on the same input reuse those results.  Entries are keyed
        structurally and the caller must clear the dict whenever ``x`` or the
        weights change.
        """
        x = T.as_tensor(x)
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise StructuralError(f"expected N x {self.in_channels} x H x W input, got {x.shape}")
        if cache is not None and T._grad_enabled:
            raise UsageError("forward cache is for inference; wrap the call in no_grad()")
        if cache is not None and ("logits", genome.key()) in cache:
            return cache[("logits", genome.key())]
        stem = self.params_of(0)
        s = cache.get(("stem",)) if cache is not None else None
        if s is None:
            s = T.relu(T.sample_norm(T.conv2d(x, stem["w"], None, stride=1, padding=1)))
            if cache is not None:
                cache[("stem",)] = s
        history = [(s, ("stem",))]
        k = self.space.input_count
        for layer in range(self.space.stack_depth):
            prev = history[-k:]
            prev = [history[0]] * (k - len(prev)) + prev
            target = prev[-1][0].shape[2]
            aligned = []
            for t, key in prev:
                while t.shape[2] > target:
                    t, key = T.factorized_reduce(t), ("fr", key)
                aligned.append((t, key))
            history.append(self._cell(layer, genome, aligned, cache))
        cls = self.params_of(self.num_slots - 1)
        logits = T.linear(T.global_avg_pool(T.sample_norm(history[-1][0])), cls["w"], cls["b"])
        if cache is not None:
            cache[("logits", genome.key())] = logits
        return logits

    # ------------------------------------------------------------ io

    def to_bytes(self, meta: dict | None = None) -> bytes:
        m = {"space": self.space.to_dict(), "num_classes": self.num_classes, "in_channels": self.in_channels}
        if meta:
            m["run"] = meta
        return self.store.to_bytes(m)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["SuperNet", dict]:
        store, meta = ParamStore.from_bytes(blob)
        net = cls(SpaceDescriptor.from_dict(meta["space"]), meta["num_classes"], meta["in_channels"], rng=None)
        net.store.copy_from(store)
        return net, meta.get("run", {})


@dataclass
class SampledNet:
    """Architecture ``genome`` realised on the shared weights of ``net``."""

    genome: Genome
    mask: np.ndarray
    net: SuperNet = field(repr=False)

    def forward(self, x) -> Tensor:
        return self.net.forward(self.genome, x)

    def loss(self, batch: Batch) -> tuple[Tensor, LossValue]:
        loss, correct = T.cross_entropy(self.forward(batch.inputs), batch.targets)
        return loss, LossValue(float(loss.data), correct)

    def logits(self, x) -> np.ndarray:
        with T.no_grad():
            return self.forward(x).data


# ---------------------------------------------------------------- gradients

def grad_single(s: SampledNet, batch: Batch) -> tuple[np.ndarray, LossValue]:
    """Masked gradient dL/dW of one sampled network.

    Overwrites ``store.grad`` with the result (and returns a copy of it).
    """
    store = s.net.store
    store.zero_grad()
    loss, lv = s.loss(batch)
    loss.backward()
    return store.grad.copy(), lv


def _accumulate(net: SuperNet, genomes: Sequence[Genome], batch: Batch) -> list[LossValue]:
    store = net.store
    store.zero_grad()
    terms, values = [], []
    for g in genomes:
        loss, lv = net.sample(g).loss(batch)
        terms.append(loss)
        values.append(lv)
    total = terms[0] if len(terms) == 1 else _mean_scalar(terms)
    total.backward()
    return values


def _mean_scalar(terms: Sequence[Tensor]) -> Tensor:
    k = len(terms)
    out = T._make(np.array(0.0), terms, lambda g: [g / k] * k)
    out.data = np.array(sum(float(t.data) for t in terms) / k)
    return out


def grad_population(net: SuperNet, genomes: Sequence[Genome], batch: Batch) -> tuple[np.ndarray, list[LossValue]]:
    """``(1/P) * sum_i dL_i/dW * mask_i`` over the whole population."""
    if len(genomes) == 0:
        raise ConfigError("grad_population needs at least one genome")
    values = _accumulate(net, genomes, batch)
    return net.store.grad.copy(), values


def grad_minibatch(net: SuperNet, genomes: Sequence[Genome], B: int, rng: np.random.Generator,
                   batch: Batch) -> tuple[np.ndarray, list[LossValue], np.ndarray]:
    """Average gradient over ``B`` architectures drawn without replacement.

    Returns the gradient, the per-architecture losses and the drawn indices.
    ``store.grad`` is left holding the gradient, ready for ``sgd_step``.
    """
    if not 1 <= B <= len(genomes):
        raise ConfigError(f"architecture batch B={B} outside [1, {len(genomes)}]")
    idx = np.sort(rng.choice(len(genomes), size=B, replace=False))
    values = _accumulate(net, [genomes[i] for i in idx], batch)
    return net.store.grad.copy(), values, idx
