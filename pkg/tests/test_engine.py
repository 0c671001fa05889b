import csv
import json
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from evonas import engine
from evonas.data import Dataset
from evonas.engine import (
    FITNESS_COLUMNS,
    EvolutionConfig,
    SearchData,
    TimeModel,
    checkpoint_load,
    checkpoint_save,
    estimate_search_time,
    front0,
    init_population,
    new_state,
    read_fitness,
    run_generation,
    run_search,
    state_from_bytes,
    state_to_bytes,
    warmup,
)
from evonas.errors import ConfigError, CorruptFileError, DataError, UsageError, VersionMismatchError
from evonas.nn.batch import LossValue
from evonas.nn.params import FORMAT_VERSION, read_container, write_container
from evonas.objectives import default_lut

from conftest import tiny_config

ROOT = __import__("pathlib").Path(__file__).resolve().parents[1]


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def data(cfg):
    return SearchData.from_spec(cfg.data, cfg.seed)


def random_evaluator(state, genomes):
    # accuracy drawn from the search stream so the run stays reproducible
    return state.rng.random(len(genomes))


def started(cfg, data):
    state = new_state(cfg, data.param.num_classes, data.param.input_shape[0])
    shape = data.arch.input_shape
    init_population(state, cfg, random_evaluator, shape, default_lut(cfg.space, shape[1]))
    return state


# ---------------------------------------------------------------- config

@pytest.mark.parametrize("kw", [dict(P=1), dict(t=0), dict(B=0), dict(B=5), dict(E_evo=0), dict(E_param=0),
                                dict(E_warm=-1), dict(lr=0), dict(lr_min=1.0), dict(lr_schedule="step"),
                                dict(momentum=-0.1), dict(grad_clip=0), dict(objectives=("params", "error")),
                                dict(objectives=("error",)), dict(objectives=("error", "params", "params")),
                                dict(selection="random"), dict(newcomer_speed="max"), dict(eval_batch_size=0)])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        tiny_config(**kw)


def test_config_roundtrip(cfg, tmp_path):
    again = EvolutionConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    cfg.save(tmp_path / "c.json")
    assert EvolutionConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigError):
        EvolutionConfig.from_dict({**cfg.to_dict(), "popsize": 3})


def test_shipped_configs_load():
    for name in ("desk.json", "cifar10.json"):
        c = EvolutionConfig.load(ROOT / "configs" / name)
        assert c.objectives[0] == "error"
    c = EvolutionConfig.load(ROOT / "configs" / "cifar10.json")
    assert (c.P, c.E_warm, c.E_evo, c.E_param, c.B) == (128, 50, 45, 10, 1)


def test_bad_config_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        EvolutionConfig.load(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        EvolutionConfig.load(tmp_path / "bad.json")


# ---------------------------------------------------------------- warmup

def test_warmup_samples_ops_uniformly(cfg, monkeypatch):
    n_steps = 10_000
    seen = []

    def fake_grad(sample, batch):
        seen.append(sample.genome)
        return None, LossValue(1.0, 0)

    monkeypatch.setattr(engine, "grad_single", fake_grad)
    monkeypatch.setattr(engine, "sgd_step", lambda *a, **k: None)
    ds = Dataset(np.zeros((4, 1, 8, 8), dtype=np.float32), [0, 1, 2, 3])
    c = replace(cfg, E_warm=n_steps, data=replace(cfg.data, batch_size=4))
    state = new_state(c, 4, 1)
    warmup(state, c, SearchData(ds, ds))
    assert len(seen) == n_steps and state.warm and state.epochs_done == n_steps
    ops = np.array([[n.op_a, n.op_b] for g in seen for cell in (g.normal, g.reduction) for n in cell.nodes]).ravel()
    freq = np.bincount(ops, minlength=len(c.space.op_set)) / len(ops)
    assert np.all(np.abs(freq - 1 / len(c.space.op_set)) < 0.01)


def test_warmup_zero_epochs_needs_resume(cfg, data):
    c = replace(cfg, E_warm=0)
    state = new_state(c, 4, 1)
    with pytest.raises(ConfigError):
        warmup(state, c, data)
    c = replace(c, allow_resume=True)
    with pytest.raises(ConfigError):
        warmup(state, c, data)
    assert warmup(state, c, data, resuming=True) == []


def test_warmup_loss_decreases(cfg, data):
    c = replace(cfg, E_warm=6)
    state = new_state(c, 4, 1)
    losses = warmup(state, c, data)
    q = len(losses) // 4
    assert np.mean(losses[-q:]) < np.mean(losses[:q])


# ---------------------------------------------------------------- one generation

def test_generation_evaluates_all_and_keeps_P(cfg, data):
    state = started(cfg, data)
    calls = []

    def ev(st, genomes):
        calls.append(len(genomes))
        return random_evaluator(st, genomes)

    for gen in range(1, 4):
        run_generation(state, cfg, data, ev, optimize=False)
        assert state.generation == gen and len(state.population) == cfg.P
        assert len({g.id for g in state.population}) == cfg.P
        assert set(state.records) == {g.id for g in state.population}
    assert calls == [(cfg.t + 1) * cfg.P] * 3
    for rec in state.population_records():
        assert rec.accuracy_history[-1][0] == 3


def test_generation_keeps_history_of_survivors(cfg, data):
    state = started(cfg, data)
    before = {g.id: list(state.records[g.id].accuracy_history) for g in state.population}
    run_generation(state, cfg, data, random_evaluator, optimize=False)
    for g in state.population:
        hist = state.records[g.id].accuracy_history
        if g.id in before:
            assert hist[:-1] == before[g.id]
        else:
            assert len(hist) == 1


@pytest.mark.parametrize("where", ["evaluator", "selection"])
def test_generation_is_atomic(cfg, data, monkeypatch, where):
    state = started(cfg, data)
    snap = state_to_bytes(state)

    def boom(*a, **k):
        raise DataError("injected")

    if where == "evaluator":
        ev = boom
    else:
        ev = random_evaluator
        monkeypatch.setattr(engine, "select", boom)
    with pytest.raises(DataError):
        run_generation(state, cfg, data, ev)
    assert state_to_bytes(state) == snap
    assert not state.net.store.touched.any()


def test_generation_needs_population(cfg, data):
    with pytest.raises(UsageError):
        run_generation(new_state(cfg, 4, 1), cfg, data)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(cfg, data, tmp_path):
    state = started(cfg, data)
    run_generation(state, cfg, data, random_evaluator)
    checkpoint_save(state, tmp_path / "s.ckpt", cfg)
    back, c2 = checkpoint_load(tmp_path / "s.ckpt")
    assert c2 == cfg
    assert back.population == state.population and [g.id for g in back.population] == [g.id for g in state.population]
    assert back.records == state.records
    np.testing.assert_array_equal(back.net.store.data, state.net.store.data)
    assert back.rng.random() == state.rng.random()
    checkpoint_save(back, tmp_path / "t.ckpt", c2)
    # the rng draw above moved both streams identically
    checkpoint_save(state, tmp_path / "s.ckpt", cfg)
    assert (tmp_path / "t.ckpt").read_bytes() == (tmp_path / "s.ckpt").read_bytes()


@pytest.mark.parametrize("cut", [5, 40, -7])
def test_truncated_checkpoint(cfg, data, tmp_path, cut):
    blob = state_to_bytes(started(cfg, data), cfg)
    with pytest.raises(CorruptFileError):
        state_from_bytes(blob[:cut])


def test_flipped_payload_byte(cfg, data):
    blob = bytearray(state_to_bytes(started(cfg, data), cfg))
    blob[-3] ^= 0xFF
    with pytest.raises(CorruptFileError):
        state_from_bytes(bytes(blob))


def test_version_mismatch(cfg, data):
    header, payload = read_container(state_to_bytes(started(cfg, data), cfg), engine.STATE_MAGIC)
    blob = write_container(engine.STATE_MAGIC, header, payload)
    hlen = int.from_bytes(blob[8:16], "little")
    h = json.loads(blob[16:16 + hlen])
    h["version"] = FORMAT_VERSION + 1
    hb = json.dumps(h, sort_keys=True).encode()
    bad = engine.STATE_MAGIC + len(hb).to_bytes(8, "little") + hb + payload
    with pytest.raises(VersionMismatchError):
        state_from_bytes(bad)


def test_resume_equals_straight_run(tmp_path):
    cfg = tiny_config(E_evo=5)
    straight = run_search(cfg, tmp_path / "a")
    run_search(cfg, tmp_path / "b", stop_after=3)
    resumed = run_search(cfg, tmp_path / "b", resume=tmp_path / "b" / "state.ckpt")
    assert resumed.state.generation == 5
    for name in ("fitness.csv", "pareto.json", "state.ckpt", "supernet.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert straight.mean_accuracy == resumed.mean_accuracy


def test_resume_rejects_other_space(tmp_path):
    cfg = tiny_config(E_evo=2)
    run_search(cfg, tmp_path, stop_after=1)
    with pytest.raises(ConfigError):
        run_search(replace(cfg, P=6, B=1), tmp_path, resume=tmp_path / "state.ckpt")


# ---------------------------------------------------------------- logs

def test_fitness_csv_layout(tmp_path):
    cfg = tiny_config()
    res = run_search(cfg, tmp_path)
    with open(tmp_path / "fitness.csv", newline="") as f:
        header = next(csv.reader(f))
    assert tuple(header) == FITNESS_COLUMNS
    rows = read_fitness(tmp_path / "fitness.csv")
    assert len(rows) == cfg.P * (cfg.E_evo + 1)
    assert sorted({int(r["generation"]) for r in rows}) == list(range(cfg.E_evo + 1))
    assert sorted(res.mean_accuracy) == list(range(cfg.E_evo + 1))
    assert front0(res.state, cfg)


def test_errors_carry_generation(tmp_path, monkeypatch):
    cfg = tiny_config()
    real = engine.run_generation

    def flaky(state, *a, **k):
        if state.generation == 1:
            raise DataError("bad batch")
        return real(state, *a, **k)

    monkeypatch.setattr(engine, "run_generation", flaky)
    with pytest.raises(DataError, match="generation 2: bad batch"):
        run_search(cfg, tmp_path)
    # the checkpoint on disk is the last good generation
    state, _ = checkpoint_load(tmp_path / "state.ckpt")
    assert state.generation == 1


# ---------------------------------------------------------------- cost model

def test_time_estimate_reference_point():
    b = estimate_search_time(EvolutionConfig(), TimeModel(60.0, 5.0))
    assert b.T_warm == 3000 and b.T_param == 45 * 10 * 60 and b.T_arch == 45 * 5
    assert b.T_total == 30225.0
    assert abs(b.days - 0.35) < 0.1


def test_time_estimate_rejects_B0():
    with pytest.raises(ConfigError):
        estimate_search_time(SimpleNamespace(E_warm=50, E_evo=45, E_param=10, B=0), TimeModel(60.0, 5.0))


def test_time_estimate_scaling():
    tm = TimeModel(60.0, 5.0)
    a = estimate_search_time(EvolutionConfig(), tm)
    b = estimate_search_time(SimpleNamespace(E_warm=50, E_evo=90, E_param=10, B=1), tm)
    assert b.T_evo == 2 * a.T_evo and b.T_warm == a.T_warm
    c = estimate_search_time(SimpleNamespace(E_warm=50, E_evo=45, E_param=10, B=4), tm)
    assert c.T_param == 4 * a.T_param


@pytest.mark.parametrize("tr,val", [(0, 1), (1, 0), (-1, 1)])
def test_time_model_rejects(tr, val):
    with pytest.raises(ConfigError):
        TimeModel(tr, val)
