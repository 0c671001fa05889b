"""Search loop: warmup, alternating weight/architecture updates, checkpoints and the cost model."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DataLoader, Dataset, DatasetSpec
from .errors import ConfigError, CorruptFileError, EvonasError, UsageError
from .moea import nondominated_sort, nsga3_select, pnsga3_select
from .nn.optim import cosine_lr, sgd_step
from .nn.params import read_container, write_container
from .objectives import (
    NEWCOMER_RULES,
    OBJECTIVES,
    FitnessRecord,
    LatencyLUT,
    accuracy_speed,
    count_flops,
    count_params,
    default_lut,
    evaluate_population,
    latency_proxy,
    objective_matrix,
)
from .search_space import Genome, SpaceDescriptor, format_genome, generate_offspring, parse_genome, random_genome
from .supernet import SuperNet, grad_minibatch, grad_single

log = logging.getLogger(__name__)

STATE_MAGIC = b"EVSTATE1"
FITNESS_COLUMNS = ("generation", "genome_id", "error", "params", "flops", "latency_ms", "speed")


@dataclass
class EvolutionConfig:
    P: int = 128
    t: int = 1
    B: int = 1
    E_warm: int = 50
    E_evo: int = 45
    E_param: int = 10
    lr: float = 0.025
    lr_min: float = 0.001
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float | None = 5.0
    seed: int = 0
    objectives: tuple[str, ...] = ("error", "params")
    selection: str = "pnsga3"
    newcomer_speed: str = "zero"
    allow_resume: bool = False
    eval_batch_size: int = 256
    latency_lut: str | None = None
    space: SpaceDescriptor = field(default_factory=SpaceDescriptor)
    data: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        self.objectives = tuple(self.objectives)
        self.validate()

    def validate(self) -> None:
        if self.P < 2:
            raise ConfigError(f"P must be >= 2, got {self.P}")
        if self.t < 1:
            raise ConfigError(f"t must be >= 1, got {self.t}")
        if not 1 <= self.B <= self.P:
            raise ConfigError(f"B must lie in [1, P={self.P}], got {self.B}")
        if self.E_evo < 1 or self.E_param < 1 or self.E_warm < 0:
            raise ConfigError("E_evo and E_param must be >= 1 and E_warm >= 0")
        if not self.lr > 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError("need 0 <= lr_min <= lr and lr > 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.objectives[:1] != ("error",) or len(self.objectives) < 2:
            raise ConfigError("objectives must start with 'error' and name at least one more")
        bad = [o for o in self.objectives if o not in OBJECTIVES]
        if bad or len(set(self.objectives)) != len(self.objectives):
            raise ConfigError(f"objectives {self.objectives} must be distinct names from {OBJECTIVES}")
        if self.selection not in ("pnsga3", "nsga3"):
            raise ConfigError(f"unknown selection {self.selection!r}")
        if self.newcomer_speed not in NEWCOMER_RULES:
            raise ConfigError(f"newcomer_speed must be one of {NEWCOMER_RULES}")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size must be >= 1")

    @property
    def total_param_epochs(self) -> int:
        return self.E_warm + self.E_evo * self.E_param

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return cosine_lr(epoch, self.total_param_epochs, self.lr, self.lr_min)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["objectives"] = list(self.objectives)
        d["space"] = self.space.to_dict()
        d["data"] = self.data.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvolutionConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "space" in d:
            d["space"] = SpaceDescriptor.from_dict(d["space"])
        if "data" in d:
            d["data"] = DatasetSpec.from_dict(d["data"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "EvolutionConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class SearchState:
    generation: int
    population: list[Genome]
    records: dict[int, FitnessRecord]
    net: SuperNet
    rng: np.random.Generator
    next_id: int = 0
    epochs_done: int = 0
    warm: bool = False

    def population_records(self) -> list[FitnessRecord]:
        return [self.records[g.id] for g in self.population]


@dataclass
class SearchData:
    param: Dataset
    arch: Dataset

    @classmethod
    def from_spec(cls, spec: DatasetSpec, seed: int) -> "SearchData":
        return cls(*spec.load(seed))


Evaluator = Callable[[SearchState, Sequence[Genome]], np.ndarray]


# ---------------------------------------------------------------- setup

def new_state(cfg: EvolutionConfig, num_classes: int, in_channels: int) -> SearchState:
    net = SuperNet(cfg.space, num_classes, in_channels, rng=np.random.default_rng([cfg.seed, 1]))
    return SearchState(0, [], {}, net, np.random.default_rng(cfg.seed))


def _loader(cfg: EvolutionConfig, data: SearchData) -> DataLoader:
    return DataLoader(data.param, cfg.data.batch_size, flip=cfg.data.flip, crop=cfg.data.crop)


def warmup(state: SearchState, cfg: EvolutionConfig, data: SearchData, resuming: bool = False) -> list[float]:
    """Train the SuperNet for ``E_warm`` epochs, one fresh uniform random genome per mini-batch.

    Returns the per-step training losses.
    """
    if cfg.E_warm == 0 and not (cfg.allow_resume and resuming):
        raise ConfigError("E_warm=0 needs allow_resume and a resumed SuperNet")
    losses = []
    loader = _loader(cfg, data)
    for _ in range(cfg.E_warm):
        lr = cfg.lr_at(state.epochs_done)
        for batch in loader.epoch(state.rng):
            g = random_genome(cfg.space, state.rng)
            _, lv = grad_single(state.net.sample(g), batch)
            sgd_step(state.net.store, lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
            losses.append(lv.value)
        state.epochs_done += 1
    state.warm = True
    return losses


def make_lut(cfg: EvolutionConfig, image_size: int) -> LatencyLUT:
    if cfg.latency_lut:
        return LatencyLUT.load(cfg.latency_lut)
    return default_lut(cfg.space, image_size)


def measure(g: Genome, net: SuperNet, input_shape: tuple[int, int, int], lut: LatencyLUT) -> FitnessRecord:
    return FitnessRecord(g.id, count_params(g, net), count_flops(g, net, input_shape),
                         latency_proxy(g, lut, net.space))


def supernet_evaluator(data: SearchData, batch_size: int) -> Evaluator:
    def evaluate(state: SearchState, genomes: Sequence[Genome]) -> np.ndarray:
        return evaluate_population(state.net, genomes, data.arch.images, data.arch.labels, batch_size)
    return evaluate


def init_population(state: SearchState, cfg: EvolutionConfig, evaluator: Evaluator,
                    input_shape: tuple[int, int, int], lut: LatencyLUT) -> None:
    """Random population, measured and evaluated as generation 0."""
    pop = [random_genome(cfg.space, state.rng, i) for i in range(cfg.P)]
    accs = evaluator(state, pop)
    state.records = {}
    for g, a in zip(pop, accs):
        rec = measure(g, state.net, input_shape, lut)
        rec.add(0, float(a))
        state.records[g.id] = rec
    state.population = pop
    state.next_id = cfg.P
    state.generation = 0


# ---------------------------------------------------------------- one generation

def select(objs: np.ndarray, speeds: np.ndarray, cfg: EvolutionConfig) -> np.ndarray:
    if cfg.selection == "nsga3":
        return nsga3_select(objs, cfg.P)
    return pnsga3_select(objs, speeds, cfg.P)


def optimize_parameters(state: SearchState, cfg: EvolutionConfig, data: SearchData) -> list[float]:
    """``E_param`` epochs; each mini-batch averages the gradients of ``B`` population members."""
    loader = _loader(cfg, data)
    losses = []
    for _ in range(cfg.E_param):
        lr = cfg.lr_at(state.epochs_done)
        for batch in loader.epoch(state.rng):
            _, lvs, _ = grad_minibatch(state.net, state.population, cfg.B, state.rng, batch)
            sgd_step(state.net.store, lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
            losses.append(float(np.mean([v.value for v in lvs])))
        state.epochs_done += 1
    return losses


def run_generation(state: SearchState, cfg: EvolutionConfig, data: SearchData | None,
                   evaluator: Evaluator | None = None, lut: LatencyLUT | None = None,
                   optimize: bool = True, input_shape: tuple[int, int, int] | None = None) -> SearchState:
    """Weights, offspring, evaluation of all ``(t+1)P`` candidates, selection back to ``P``.

    The state is only changed once every step succeeded; on error weights,
    optimizer buffers and the random stream are restored.
    """
    if not state.population:
        raise UsageError("population not initialized")
    if evaluator is None:
        if data is None:
            raise UsageError("run_generation needs data or an evaluator")
        evaluator = supernet_evaluator(data, cfg.eval_batch_size)
    if input_shape is None:
        if data is None:
            raise UsageError("input_shape is required without data")
        input_shape = data.arch.input_shape
    lut = lut or default_lut(cfg.space, input_shape[1])
    store = state.net.store
    snapshot = (store.data.copy(), store.momentum.copy(), state.rng.bit_generator.state, state.epochs_done)
    try:
        if optimize:
            optimize_parameters(state, cfg, data)
        gen = state.generation + 1
        kids = generate_offspring(state.population, cfg.t, state.rng, cfg.space, state.next_id)
        candidates = list(state.population) + kids
        accs = evaluator(state, candidates)
        records = []
        for g, a in zip(candidates, accs):
            if g.id in state.records:
                old = state.records[g.id]
                rec = replace(old, accuracy_history=list(old.accuracy_history))
            else:
                rec = measure(g, state.net, input_shape, lut)
            rec.add(gen, float(a))
            records.append(rec)
        objs = objective_matrix(records, cfg.objectives)
        speeds = np.array([accuracy_speed(r, cfg.newcomer_speed) for r in records])
        keep = select(objs, speeds, cfg)
    except BaseException:
        store.data[:] = snapshot[0]
        store.momentum[:] = snapshot[1]
        store.zero_grad()
        state.rng.bit_generator.state = snapshot[2]
        state.epochs_done = snapshot[3]
        raise
    state.population = [candidates[i] for i in keep]
    state.records = {candidates[i].id: records[i] for i in keep}
    state.next_id += len(kids)
    state.generation = gen
    return state


# ---------------------------------------------------------------- logs

def _num(x: float) -> str:
    return repr(float(x))


def fitness_rows(state: SearchState, cfg: EvolutionConfig) -> list[list[str]]:
    rows = []
    for rec in state.population_records():
        rows.append([str(state.generation), str(rec.genome_id), _num(rec.error), str(rec.params),
                     str(rec.flops), _num(rec.latency_ms), _num(accuracy_speed(rec, cfg.newcomer_speed))])
    return rows


def _write_rows(path: Path, rows: list[list[str]], header: bool) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(FITNESS_COLUMNS)
    w.writerows(rows)
    with open(path, "w" if header else "a", newline="") as f:
        f.write(buf.getvalue())


def _truncate_fitness(path: Path, generation: int) -> None:
    lines = path.read_text().splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= generation]
    path.write_text("".join(kept))


def front0(state: SearchState, cfg: EvolutionConfig) -> list[int]:
    """Positions in ``state.population`` of the non-dominated members."""
    objs = objective_matrix(state.population_records(), cfg.objectives)
    return list(nondominated_sort(objs)[0])


# ---------------------------------------------------------------- checkpoints

def _state_header(state: SearchState, cfg: EvolutionConfig | None) -> dict:
    space = state.net.space
    return {
        "kind": "search_state",
        "generation": state.generation,
        "next_id": state.next_id,
        "epochs_done": state.epochs_done,
        "warm": state.warm,
        "population": [[g.id, g.origin, format_genome(g, space)] for g in state.population],
        "records": [state.records[g.id].to_dict() for g in state.population],
        "rng": state.rng.bit_generator.state,
        "config": cfg.to_dict() if cfg is not None else None,
    }


def state_to_bytes(state: SearchState, cfg: EvolutionConfig | None = None) -> bytes:
    return write_container(STATE_MAGIC, _state_header(state, cfg), state.net.to_bytes())


def state_from_bytes(blob: bytes) -> tuple[SearchState, EvolutionConfig | None]:
    header, payload = read_container(blob, STATE_MAGIC)
    try:
        net, _ = SuperNet.from_bytes(payload)
        space = net.space
        pop = [parse_genome(text, space, gid).with_id(gid, origin) for gid, origin, text in header["population"]]
        records = {r["genome_id"]: FitnessRecord.from_dict(r) for r in header["records"]}
        rng = np.random.Generator(getattr(np.random, header["rng"]["bit_generator"])())
        rng.bit_generator.state = header["rng"]
        cfg = EvolutionConfig.from_dict(header["config"]) if header.get("config") else None
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        if isinstance(exc, EvonasError):
            raise
        raise CorruptFileError(f"malformed search state: {exc!r}") from None
    state = SearchState(header["generation"], pop, records, net, rng, header["next_id"],
                        header["epochs_done"], header["warm"])
    return state, cfg


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def checkpoint_save(state: SearchState, path: str | Path, cfg: EvolutionConfig | None = None) -> None:
    _atomic_write(Path(path), state_to_bytes(state, cfg))


def checkpoint_load(path: str | Path) -> tuple[SearchState, EvolutionConfig | None]:
    """Fully parse and verify before returning; nothing is shared with a live state."""
    return state_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- full search

@dataclass
class SearchResult:
    state: SearchState
    out_dir: Path
    mean_accuracy: dict[int, float]


def run_search(cfg: EvolutionConfig, out_dir: str | Path, data: SearchData | None = None,
               resume: str | Path | None = None, stop_after: int | None = None) -> SearchResult:
    """Warmup then ``E_evo`` generations, writing ``fitness.csv``, ``pareto.json`` and checkpoints.

    ``stop_after`` ends the run after that generation (used to test resuming).
    """
    from .export import export_pareto

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or SearchData.from_spec(cfg.data, cfg.seed)
    input_shape = data.arch.input_shape
    lut = make_lut(cfg, input_shape[1])
    evaluator = supernet_evaluator(data, cfg.eval_batch_size)
    fitness = out / "fitness.csv"

    if resume is not None:
        state, saved = checkpoint_load(resume)
        if saved is not None and (saved.space != cfg.space or saved.P != cfg.P):
            raise ConfigError("resume config differs from the checkpoint in space or P")
        if not fitness.exists():
            raise UsageError(f"cannot resume: {fitness} is missing")
        _truncate_fitness(fitness, state.generation)
        if not state.warm:
            warmup(state, cfg, data, resuming=True)
    else:
        state = new_state(cfg, max(data.param.num_classes, data.arch.num_classes), input_shape[0])
        log.info("warmup: %d epochs", cfg.E_warm)
        warmup(state, cfg, data)
        init_population(state, cfg, evaluator, input_shape, lut)
        _write_rows(fitness, fitness_rows(state, cfg), header=True)
        checkpoint_save(state, out / "state.ckpt", cfg)

    while state.generation < cfg.E_evo and (stop_after is None or state.generation < stop_after):
        g = state.generation + 1
        try:
            run_generation(state, cfg, data, evaluator, lut, input_shape=input_shape)
        except EvonasError as exc:
            raise type(exc)(f"generation {g}: {exc}") from exc
        _write_rows(fitness, fitness_rows(state, cfg), header=False)
        checkpoint_save(state, out / "state.ckpt", cfg)
        accs = [r.accuracy for r in state.population_records()]
        log.info("generation %d: mean acc %.4f, params %d..%d", g, np.mean(accs),
                 min(r.params for r in state.population_records()),
                 max(r.params for r in state.population_records()))

    _atomic_write(out / "supernet.ckpt", state.net.to_bytes({"generation": state.generation}))
    export_pareto(state, cfg, out / "pareto.json", "json")
    return SearchResult(state, out, read_mean_accuracy(fitness))


def read_fitness(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def read_mean_accuracy(path: str | Path) -> dict[int, float]:
    by_gen: dict[int, list[float]] = {}
    for row in read_fitness(path):
        by_gen.setdefault(int(row["generation"]), []).append(1.0 - float(row["error"]))
    return {g: float(np.mean(v)) for g, v in sorted(by_gen.items())}


# ---------------------------------------------------------------- cost model

@dataclass(frozen=True)
class TimeModel:
    T_tr: float
    T_val: float

    def __post_init__(self):
        if not (self.T_tr > 0 and self.T_val > 0):
            raise ConfigError("T_tr and T_val must be positive")


@dataclass(frozen=True)
class TimeBreakdown:
    T_warm: float
    T_param: float
    T_arch: float
    T_evo: float
    T_total: float

    @property
    def days(self) -> float:
        return self.T_total / 86400.0

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["days"] = self.days
        return d


def estimate_search_time(cfg, tm: TimeModel) -> TimeBreakdown:
    """``E_warm*T_tr + E_evo*(E_param*T_tr*B + T_val)`` with its parts.

    ``cfg`` is anything with ``E_warm``, ``E_evo``, ``E_param`` and ``B``.
    """
    if cfg.B < 1:
        raise ConfigError(f"B must be >= 1, got {cfg.B}")
    if cfg.E_warm < 0 or cfg.E_evo < 1 or cfg.E_param < 1:
        raise ConfigError("need E_warm >= 0, E_evo >= 1, E_param >= 1")
    t_warm = cfg.E_warm * tm.T_tr
    t_param = cfg.E_evo * cfg.E_param * tm.T_tr * cfg.B
    t_arch = cfg.E_evo * tm.T_val
    return TimeBreakdown(t_warm, t_param, t_arch, t_param + t_arch, t_warm + t_param + t_arch)
