import numpy as np
import pytest

from evonas.data import SyntheticImageTask
from evonas.engine import EvolutionConfig
from evonas.data import DatasetSpec
from evonas.search_space import FULL_OPS, SpaceDescriptor

# every op kind, two nodes, one reduction: small enough for per-genome oracles
SMALL = SpaceDescriptor(op_set=FULL_OPS, node_count=2, input_count=2, stack_depth=3,
                        reduction_positions=(1,), stem_channels=4)

_LINES = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_space():
    return SMALL


def tiny_config(**kw) -> EvolutionConfig:
    """A search that finishes in a few seconds."""
    base = dict(P=4, t=1, B=1, E_warm=1, E_evo=3, E_param=1, lr=0.05,
                space=SpaceDescriptor(node_count=2, stack_depth=3, reduction_positions=(1,), stem_channels=4),
                data=DatasetSpec(synthetic=SyntheticImageTask(samples=128, image_size=8), batch_size=32))
    base.update(kw)
    return EvolutionConfig(**base)


@pytest.fixture
def report(request):
    """``report(name, ok, detail)`` prints and records one acceptance line, returning ``ok``."""
    lines = request.config.stash.setdefault(_LINES, [])

    def rep(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return rep


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
