"""Small-model-trap experiment: evolution driven by the synthetic size/convergence oracle.

No weights are trained.  A candidate's accuracy is read off its oracle
curve at the simulated training epoch ``warm_epochs + generation *
epochs_per_generation``, so large architectures look worse early on while
improving faster.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import EvolutionConfig, SearchState, init_population, new_state, run_generation
from .objectives import TrapOracle, count_params, default_lut, format_genome
from .search_space import SpaceDescriptor, random_genome


@dataclass
class TrapConfig:
    P: int = 32
    generations: int = 20
    warm_epochs: float = 40.0
    epochs_per_generation: float = 2.0
    noise_amp: float = 0.001
    rate_small: float = 0.1
    rate_large: float = 0.02
    newcomer_speed: str = "zero"
    image_size: int = 16
    space: SpaceDescriptor = field(default_factory=SpaceDescriptor)


@dataclass
class TrapRun:
    method: str
    seed: int
    params: list[np.ndarray]  # parameter counts of the population, per generation
    accuracy: list[np.ndarray]
    genome_ids: list[np.ndarray]

    @property
    def initial_max(self) -> int:
        return int(self.params[0].max())

    @property
    def final_max(self) -> int:
        return int(self.params[-1].max())

    @property
    def retained(self) -> float:
        return self.final_max / self.initial_max


def run_trap(method: str, seed: int, tc: TrapConfig = TrapConfig()) -> TrapRun:
    """Evolve ``tc.P`` genomes for ``tc.generations`` with ``method`` in {"nsga3", "pnsga3"}.

    The oracle's size range is the spread of the initial population.
    """
    cfg = EvolutionConfig(P=tc.P, t=1, B=1, E_warm=0, E_evo=tc.generations, E_param=1, seed=seed,
                          selection=method, newcomer_speed=tc.newcomer_speed, space=tc.space)
    state = new_state(cfg, num_classes=10, in_channels=1)
    net = state.net
    sizes: dict = {}

    def size(g) -> int:
        k = g.key()
        if k not in sizes:
            sizes[k] = count_params(g, net)
        return sizes[k]

    # peek at the initial population to fix the oracle range, then rewind the stream
    saved = state.rng.bit_generator.state
    first = [size(random_genome(tc.space, state.rng)) for _ in range(tc.P)]
    state.rng.bit_generator.state = saved
    oracle = TrapOracle(min(first), max(first), tc.rate_small, tc.rate_large, tc.noise_amp, seed)

    def evaluate(st: SearchState, genomes) -> np.ndarray:
        gen = st.generation + 1 if st.population else 0
        epoch = tc.warm_epochs + gen * tc.epochs_per_generation
        return np.array([oracle.accuracy(size(g), format_genome(g, tc.space), epoch) for g in genomes])

    shape = (1, tc.image_size, tc.image_size)
    lut = default_lut(tc.space, tc.image_size)
    init_population(state, cfg, evaluate, shape, lut)
    run = TrapRun(method, seed, [], [], [])
    _snapshot(run, state)
    for _ in range(tc.generations):
        run_generation(state, cfg, None, evaluate, lut, optimize=False, input_shape=shape)
        _snapshot(run, state)
    return run


def _snapshot(run: TrapRun, state: SearchState) -> None:
    recs = state.population_records()
    run.params.append(np.array([r.params for r in recs]))
    run.accuracy.append(np.array([r.accuracy for r in recs]))
    run.genome_ids.append(np.array([r.genome_id for r in recs]))


def compare(seeds=range(5), tc: TrapConfig = TrapConfig()) -> dict[str, list[TrapRun]]:
    return {m: [run_trap(m, s, tc) for s in seeds] for m in ("nsga3", "pnsga3")}


def write_distribution(runs: dict[str, list[TrapRun]], path: str | Path) -> None:
    """One row per (method, seed, generation, individual): the data behind size-distribution panels."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "seed", "generation", "genome_id", "params", "accuracy"])
        for method, rs in runs.items():
            for r in rs:
                for gen, (ids, ps, accs) in enumerate(zip(r.genome_ids, r.params, r.accuracy)):
                    for i, p, a in zip(ids, ps, accs):
                        w.writerow([method, r.seed, gen, int(i), int(p), repr(float(a))])
