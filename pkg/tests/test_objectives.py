import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evonas.errors import ConfigError, DataError, StructuralError, UsageError
from evonas.nn.batch import Batch
from evonas.nn.layers import op_madds
from evonas.nn.optim import sgd_step
from evonas.objectives import (
    REF_FINAL_ACC,
    REF_SIZES,
    FitnessRecord,
    LatencyLUT,
    ObjectiveVector,
    TrapCurveModel,
    TrapOracle,
    accuracy_speed,
    count_flops,
    count_params,
    default_lut,
    edge_stages,
    evaluate_accuracy,
    evaluate_population,
    latency_proxy,
    objective_matrix,
    simulate_trap_curves,
)
from evonas.search_space import CellGenome, Genome, NodeGene, SpaceDescriptor, random_genome
from evonas.supernet import SuperNet, grad_single


def uniform_cell(space, op_name, nodes=None):
    op = space.op_id(op_name)
    n = nodes or space.node_count
    return CellGenome(tuple(NodeGene(0, 1, op, op) for _ in range(n)))


# ---------------------------------------------------------------- records

def test_objective_vector_validation():
    with pytest.raises(StructuralError):
        ObjectiveVector((1.0, 2.0), ("error",))


def test_record_history_rules():
    r = FitnessRecord(0, 10, 20, 1.0)
    r.add(1, 0.5)
    with pytest.raises(UsageError):
        r.add(1, 0.6)
    with pytest.raises((UsageError, DataError, ConfigError)):
        r.add(2, 1.5)
    assert r.error == pytest.approx(0.5)
    assert FitnessRecord.from_dict(r.to_dict()) == r


def test_speed_examples():
    r = FitnessRecord(0, 1, 1, 0.0, [(1, 0.50), (2, 0.60)])
    assert accuracy_speed(r) == pytest.approx(0.10)
    assert accuracy_speed(FitnessRecord(0, 1, 1, 0.0, [(1, 0.42)])) == 0.42
    assert accuracy_speed(FitnessRecord(0, 1, 1, 0.0, [(1, 0.42)]), newcomer="zero") == 0.0
    assert accuracy_speed(FitnessRecord(0, 1, 1, 0.0, [(5, 0.7), (6, 0.7)])) == 0.0
    with pytest.raises(UsageError):
        accuracy_speed(FitnessRecord(0, 1, 1, 0.0))
    with pytest.raises(ConfigError):
        accuracy_speed(r, newcomer="pessimistic")


def test_objective_matrix_columns():
    recs = [FitnessRecord(i, 10 * i, 100 * i, 0.5 * i, [(0, 0.1 * i)]) for i in range(1, 4)]
    m = objective_matrix(recs, ("error", "params", "flops", "latency"))
    np.testing.assert_allclose(m[:, 0], [0.9, 0.8, 0.7])
    np.testing.assert_allclose(m[:, 1:], [[10, 100, 0.5], [20, 200, 1.0], [30, 300, 1.5]])


# ---------------------------------------------------------------- accuracy

@pytest.fixture
def space():
    return SpaceDescriptor(node_count=2, stack_depth=3, reduction_positions=(1,), stem_channels=4)


def test_constant_logits_give_chance(space, rng):
    net = SuperNet(space, num_classes=10, in_channels=1)
    net.store.view("classifier.w")[:] = 0
    net.store.view("classifier.b")[:] = 0
    labels = np.repeat(np.arange(10), 3)
    acc = evaluate_accuracy(net.sample(random_genome(space, rng)), rng.standard_normal((30, 1, 8, 8)), labels)
    assert acc == pytest.approx(0.1)


def test_memorizes_four_samples(space):
    rng = np.random.default_rng(0)
    net = SuperNet(space, num_classes=4, in_channels=1, rng=0)
    conv = space.op_id("conv3x3")
    cell = CellGenome((NodeGene(0, 1, conv, conv), NodeGene(1, 2, conv, conv)))
    s = net.sample(Genome(cell, cell))
    x = rng.standard_normal((4, 1, 8, 8))
    y = np.arange(4)
    for _ in range(300):
        grad_single(s, Batch(x, y))
        sgd_step(net.store, lr=0.1, momentum=0.9)
        if evaluate_accuracy(s, x, y) == 1.0:
            break
    assert evaluate_accuracy(s, x, y) == 1.0


def test_accuracy_batching_invariant(space, rng):
    net = SuperNet(space, num_classes=3, in_channels=1, rng=1)
    x = rng.standard_normal((23, 1, 8, 8))
    y = rng.integers(0, 3, 23)
    s = net.sample(random_genome(space, rng))
    whole = evaluate_accuracy(s, x, y, batch_size=23)
    logits = s.logits(x)
    assert whole == (logits.argmax(1) == y).sum() / 23
    for bs in (1, 4, 7, 100):
        assert evaluate_accuracy(s, x, y, batch_size=bs) == whole


def test_population_evaluation_matches_individual(space, rng):
    net = SuperNet(space, num_classes=3, in_channels=1, rng=1)
    x = rng.standard_normal((20, 1, 8, 8))
    y = rng.integers(0, 3, 20)
    gs = [random_genome(space, rng) for _ in range(6)] * 2
    pop = evaluate_population(net, gs, x, y, batch_size=8)
    assert list(pop) == [evaluate_accuracy(net.sample(g), x, y, batch_size=8) for g in gs]


def test_empty_validation_set(space, rng):
    net = SuperNet(space, num_classes=3, in_channels=1)
    s = net.sample(random_genome(space, rng))
    with pytest.raises(DataError):
        evaluate_accuracy(s, np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int))
    with pytest.raises(DataError):
        evaluate_population(net, [s.genome], np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int))


# ---------------------------------------------------------------- params / flops

def test_params_parameter_free_genome(space):
    net = SuperNet(space, num_classes=4, in_channels=1)
    g = Genome(uniform_cell(space, "skip"), uniform_cell(space, "none"))
    c = space.stem_channels
    assert count_params(g, net) == 9 * c + c * 4 + 4


def test_params_strictly_increase_when_none_becomes_conv(space, rng):
    net = SuperNet(space, num_classes=4, in_channels=1)
    none, conv = space.op_id("none"), space.op_id("conv3x3")
    checked = 0
    for _ in range(200):
        g = random_genome(space, rng)
        nd = g.normal.nodes[1]
        if none not in (nd.op_a, nd.op_b) or (nd.pred_a, nd.op_a) == (nd.pred_b, nd.op_b):
            continue
        pred = nd.pred_a if nd.op_a == none else nd.pred_b
        other = (nd.pred_b, nd.op_b) if nd.op_a == none else (nd.pred_a, nd.op_a)
        if other == (pred, conv):
            continue
        h_node = NodeGene(pred, other[0], conv, other[1]).canonical()
        h = Genome(CellGenome((g.normal.nodes[0], h_node)), g.reduction)
        assert count_params(h, net) > count_params(g, net)
        checked += 1
    assert checked >= 10


def test_flops_zero_op_cells(space):
    net = SuperNet(space, num_classes=4, in_channels=1)
    g = Genome(uniform_cell(space, "none"), uniform_cell(space, "none"))
    c = space.stem_channels
    assert count_flops(g, net, (1, 16, 16)) == 9 * c * 16 * 16 + c * 4


def test_flops_single_conv_edge():
    space = SpaceDescriptor(node_count=1, stack_depth=3, reduction_positions=(2,), stem_channels=8)
    net = SuperNet(space, num_classes=4, in_channels=1)
    base = Genome(uniform_cell(space, "none"), uniform_cell(space, "none"))
    conv, none = space.op_id("conv3x3"), space.op_id("none")
    g = Genome(CellGenome((NodeGene(0, 1, none, conv),)), base.reduction)
    # the normal cell occupies layers 0 and 1, both at 16x16
    diff = count_flops(g, net, (1, 16, 16)) - count_flops(base, net, (1, 16, 16))
    assert diff == 2 * 147_456


def closed_form_cell_madds(g, space, image_size):
    size, total = image_size, 0
    for layer in range(space.stack_depth):
        red = space.is_reduction(layer)
        cell = g.reduction if red else g.normal
        for node in cell.nodes:
            for pred, op in {(node.pred_a, node.op_a), (node.pred_b, node.op_b)}:
                stride = 2 if red and pred < space.input_count else 1
                out = -(-size // stride)
                total += op_madds(space.op_set[op], space.stem_channels, out, out)
        if red:
            size = -(-size // 2)
    return total


def test_flops_scale_with_depth(rng):
    shallow = SpaceDescriptor(node_count=2, stack_depth=3, reduction_positions=(1,))
    deep = SpaceDescriptor(node_count=2, stack_depth=6, reduction_positions=(1, 4))
    for _ in range(20):
        g = random_genome(shallow, rng)
        for sp in (shallow, deep):
            net = SuperNet(sp, num_classes=4, in_channels=1)
            c = sp.stem_channels
            assert count_flops(g, net, (1, 16, 16)) == 9 * c * 256 + c * 4 + closed_form_cell_madds(g, sp, 16)


# ---------------------------------------------------------------- latency

def test_latency_zero_table(space, rng):
    lut = LatencyLUT({k: 0.0 for k in default_lut(space, 16).entries}, overhead_ms=5.0)
    for _ in range(10):
        assert latency_proxy(random_genome(space, rng), lut, space) == 5.0


def test_latency_additive(space, rng):
    lut = default_lut(space, 16)
    none = space.op_id("none")
    checked = 0
    for _ in range(30):
        g = random_genome(space, rng)
        nd = g.normal.nodes[1]
        if (nd.pred_a, nd.op_a) == (nd.pred_b, nd.op_b) or none in (nd.op_a, nd.op_b):
            continue
        h = Genome(CellGenome((g.normal.nodes[0], NodeGene(nd.pred_a, nd.pred_b, nd.op_a, none).canonical())),
                   g.reduction)
        normal_layers = [l for l in range(space.stack_depth) if not space.is_reduction(l)]
        stages = ["normal0" if l == 0 else "normal1" for l in normal_layers]
        entry = sum(lut.lookup(space.op_set[nd.op_b], s, space.stem_channels) for s in stages)
        entry -= sum(lut.lookup("none", s, space.stem_channels) for s in stages)
        assert latency_proxy(g, lut, space) - latency_proxy(h, lut, space) == pytest.approx(entry)
        checked += 1
    assert checked >= 5


def test_latency_monotone_under_monotone_table(space):
    rng = np.random.default_rng(5)
    # cost rank follows op index, so swapping any op for a higher index cannot be faster
    lut = LatencyLUT({k: float(space.op_id(k.split("/")[0]) + 1) for k in default_lut(space, 16).entries})
    checked = 0
    for _ in range(200):
        g = random_genome(space, rng)
        nd = g.normal.nodes[0]
        new_op = int(rng.integers(nd.op_b, space.num_ops))
        if (nd.pred_a, nd.op_a) == (nd.pred_b, new_op) or (nd.pred_a, nd.op_a) == (nd.pred_b, nd.op_b):
            continue
        h = Genome(CellGenome((NodeGene(nd.pred_a, nd.pred_b, nd.op_a, new_op).canonical(),)
                              + g.normal.nodes[1:]), g.reduction)
        assert latency_proxy(h, lut, space) >= latency_proxy(g, lut, space)
        checked += 1
    assert checked >= 20


def test_latency_missing_key(space, rng):
    with pytest.raises(ConfigError, match="conv3x3/normal0/4"):
        latency_proxy(Genome(uniform_cell(space, "conv3x3"), uniform_cell(space, "none")),
                      LatencyLUT({}), space)


def test_lut_file_roundtrip(space, tmp_path):
    lut = default_lut(space, 16)
    lut.save(tmp_path / "lut.json")
    assert LatencyLUT.load(tmp_path / "lut.json") == lut
    (tmp_path / "flat.json").write_text('{"conv3x3/normal0/4": 1.5}')
    assert LatencyLUT.load(tmp_path / "flat.json").entries == {"conv3x3/normal0/4": 1.5}


def test_default_lut_covers_every_stage(space, rng):
    lut = default_lut(space, 16)
    assert len(lut.entries) == len(edge_stages(space)) * space.num_ops
    for _ in range(50):
        latency_proxy(random_genome(space, rng), lut, space)


# ---------------------------------------------------------------- trap curves

def test_trap_curve_saturates():
    m = TrapCurveModel(1.0, 0.9, 0.05)
    assert abs(m.accuracy(10 / 0.05) - 0.9) < 1e-3


def reference_models(noise=0.0):
    rates = (0.1, 0.05, 0.02)  # inverse to size
    return [TrapCurveModel(s, f, r, noise, seed=i) for i, (s, f, r) in enumerate(zip(REF_SIZES, REF_FINAL_ACC, rates))]


def test_reference_models_invert_ranking():
    curves = simulate_trap_curves(reference_models(), 40)
    early = curves[:, :20]
    assert np.all(early[2] < early[0]) and np.all(early[2] < early[1])
    long = simulate_trap_curves(reference_models(), 600)
    assert long[2, -1] > long[1, -1] > long[0, -1]


def test_inversion_window_exists_with_noise():
    curves = simulate_trap_curves(reference_models(0.002), 600)
    final_order = np.argsort(curves[:, -1])
    assert any(not np.array_equal(np.argsort(curves[:, e]), final_order) for e in range(30))


def test_trap_curves_deterministic():
    a = simulate_trap_curves(reference_models(0.01), 50)
    b = simulate_trap_curves(reference_models(0.01), 50)
    np.testing.assert_array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))
    with pytest.raises(ConfigError):
        simulate_trap_curves(reference_models(), 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_oracle_larger_models_converge_slower_but_finish_higher(u, v):
    o = TrapOracle(100, 1000, noise_amp=0.0)
    a, b = sorted((100 + 900 * u, 100 + 900 * v))
    ma, mb = o.model_for(a, "x"), o.model_for(b, "x")
    assert ma.convergence_rate >= mb.convergence_rate
    assert ma.final_acc <= mb.final_acc


def test_oracle_bounds_cover_space(space):
    net = SuperNet(space, num_classes=10, in_channels=1)
    o = TrapOracle.for_space(net)
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert o.min_params <= count_params(random_genome(space, rng), net) <= o.max_params
