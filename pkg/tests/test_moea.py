import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from evonas.errors import StructuralError, UsageError
from evonas.moea import (
    das_dennis,
    dominates,
    merged_layers,
    niche_select,
    nondominated_sort,
    nsga3_select,
    pnsga3_select,
    reference_directions,
)
from evonas.objectives import ObjectiveVector

from oracles import check_front_invariants, naive_dominates, naive_fronts


def pop_strategy(max_n=40):
    return st.integers(2, 3).flatmap(lambda m: hnp.arrays(
        np.float64, st.tuples(st.integers(1, max_n), st.just(m)), elements=st.integers(0, 6).map(float)))


# ---------------------------------------------------------------- dominates

def test_dominates_examples():
    assert dominates((1, 1), (2, 2))
    assert not dominates((1, 2), (2, 1)) and not dominates((2, 1), (1, 2))
    assert not dominates((1, 1), (1, 1))


def test_dominates_shape_mismatch():
    with pytest.raises(StructuralError):
        dominates((1, 2), (1, 2, 3))
    with pytest.raises(StructuralError):
        dominates(ObjectiveVector((1, 2), ("error", "params")), ObjectiveVector((1, 2), ("error", "flops")))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=3, max_size=3), st.lists(st.integers(0, 3), min_size=3, max_size=3),
       st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_dominates_strict_partial_order(a, b, c):
    assert not dominates(a, a)
    assert not (dominates(a, b) and dominates(b, a))
    if dominates(a, b) and dominates(b, c):
        assert dominates(a, c)
    assert dominates(a, b) == naive_dominates(a, b)


# ---------------------------------------------------------------- sorting

def test_sort_singleton():
    assert nondominated_sort(np.array([[3.0, 4.0]])).fronts == ((0,),)


def test_sort_chain():
    assert nondominated_sort(np.array([[1, 1], [2, 2], [3, 3.0]])).fronts == ((0,), (1,), (2,))


def test_sort_matches_naive_on_200_random():
    rng = np.random.default_rng(0)
    objs = rng.random((200, 2))
    fronts = nondominated_sort(objs).fronts
    assert [list(f) for f in fronts] == naive_fronts(objs.tolist())
    check_front_invariants(objs, fronts)


@settings(max_examples=200, deadline=None)
@given(pop_strategy())
def test_sort_invariants_with_ties(objs):
    fronts = nondominated_sort(objs).fronts
    check_front_invariants(objs, fronts)
    assert [list(f) for f in fronts] == naive_fronts(objs.tolist())


def test_sort_rejects_empty():
    with pytest.raises(StructuralError):
        nondominated_sort(np.zeros((0, 2)))


def test_front_rank():
    fs = nondominated_sort(np.array([[1, 1], [2, 2], [0, 3.0]]))
    assert list(fs.rank(3)) == [0, 1, 0]


# ---------------------------------------------------------------- reference directions

@pytest.mark.parametrize("m,p", [(2, 4), (3, 5), (4, 3)])
def test_das_dennis(m, p):
    from math import comb
    d = das_dennis(m, p)
    assert d.shape == (comb(p + m - 1, m - 1), m)
    np.testing.assert_allclose(d.sum(axis=1), 1.0)
    assert np.all(d >= 0)
    assert len({tuple(r) for r in d}) == len(d)


def test_reference_directions_smallest_lattice():
    assert len(reference_directions(2, 16)) == 16
    assert len(reference_directions(3, 16)) == 21


# ---------------------------------------------------------------- niching

def test_niche_whole_front():
    front = np.random.default_rng(0).random((5, 2))
    assert sorted(niche_select(front, 5, das_dennis(2, 4))) == list(range(5))


def test_niche_two_clusters():
    front = np.array([[0.0, 1.0], [0.05, 0.95], [0.95, 0.05], [1.0, 0.0]])
    dirs = np.array([[1.0, 0.0], [0.0, 1.0]])
    picked = niche_select(front, 2, dirs)
    assert len({p // 2 for p in picked}) == 2


def test_niche_identical_points_index_order():
    front = np.ones((6, 2))
    assert niche_select(front, 3, das_dennis(2, 3)) == [0, 1, 2]


def test_niche_k_range():
    with pytest.raises(UsageError):
        niche_select(np.ones((3, 2)), 0, das_dennis(2, 2))
    with pytest.raises(UsageError):
        niche_select(np.ones((3, 2)), 4, das_dennis(2, 2))


def test_niche_counts_already_selected():
    # the lower-right niche is already occupied, so the next pick comes from the other side
    front = np.array([[0.0, 1.0], [1.0, 0.0]])
    selected = np.array([[0.9, 0.1]])
    dirs = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert niche_select(front, 1, dirs, selected) == [0]


# ---------------------------------------------------------------- selection

def test_nsga3_keeps_whole_fronts():
    objs = np.array([[1, 1], [2, 2], [3, 3], [0, 4.0], [4, 0.0]])
    assert list(nsga3_select(objs, 3)) == [0, 3, 4]


def test_pnsga3_first_layer_exact_fit():
    objs = np.array([[0.1, 100], [0.2, 50], [0.3, 20], [0.25, 120], [0.35, 60], [0.4, 300]])
    speeds = [0.01, 0.01, 0.01, 0.01, 0.01, 0.2]
    assert merged_layers(objs, speeds)[0] == [0, 1, 2, 5]
    assert list(pnsga3_select(objs, speeds, 4)) == [0, 1, 2, 5]


def test_pnsga3_protects_fast_large_model():
    # #5 is large and dominated by #0 on (error, params) but rises fastest
    objs = np.array([[0.1, 100], [0.2, 50], [0.3, 20], [0.25, 120], [0.35, 60], [0.4, 300]])
    speeds = [0.01, 0.01, 0.01, 0.01, 0.01, 0.2]
    assert 5 in pnsga3_select(objs, speeds, 5)
    assert 5 not in nsga3_select(objs, 5)


def test_pnsga3_equal_speeds_is_nsga3():
    # params increase front by front, so the Q fronts (params only) never add anything new
    objs = np.array([[0.5, 1], [0.4, 2], [0.3, 3], [0.6, 4], [0.5, 5], [0.7, 6], [0.65, 7], [0.9, 8.0]])
    speeds = np.zeros(len(objs))
    assert merged_layers(objs, speeds) == [list(f) for f in nondominated_sort(objs).fronts]
    for P in range(1, len(objs) + 1):
        assert list(pnsga3_select(objs, speeds, P)) == list(nsga3_select(objs, P))


def test_pnsga3_too_small():
    with pytest.raises(UsageError):
        pnsga3_select(np.ones((3, 2)), [0, 0, 0], 4)
    with pytest.raises(StructuralError):
        pnsga3_select(np.ones((3, 2)), [0, 0], 2)


def test_merged_layers_are_disjoint_unions():
    rng = np.random.default_rng(4)
    for _ in range(50):
        objs = rng.integers(0, 5, (30, 2)).astype(float)
        speeds = rng.integers(-2, 3, 30) / 10
        layers = merged_layers(objs, speeds)
        flat = [i for layer in layers for i in layer]
        assert len(flat) == len(set(flat)) == 30


@settings(max_examples=150, deadline=None)
@given(pop_strategy(30), st.data())
def test_pnsga3_protection_property(objs, data):
    n = len(objs)
    speeds = np.array(data.draw(st.lists(st.integers(-3, 3), min_size=n, max_size=n))) / 10.0
    P = data.draw(st.integers(1, n))
    sel = pnsga3_select(objs, speeds, P)
    assert len(sel) == P == len(set(sel.tolist()))
    assert np.all((sel >= 0) & (sel < n))
    q = objs.copy()
    q[:, 0] = -speeds
    protected = set(naive_fronts(objs.tolist())[0]) | set(naive_fronts(q.tolist())[0])
    if len(protected) <= P:
        assert protected <= set(sel.tolist())


@settings(max_examples=100, deadline=None)
@given(pop_strategy(30), st.data())
def test_nsga3_selects_whole_leading_fronts(objs, data):
    P = data.draw(st.integers(1, len(objs)))
    sel = set(nsga3_select(objs, P).tolist())
    assert len(sel) == P
    taken = 0
    for f in naive_fronts(objs.tolist()):
        if taken + len(f) <= P:
            assert set(f) <= sel
            taken += len(f)
        else:
            break


def test_selection_deterministic():
    rng = np.random.default_rng(9)
    objs = rng.random((64, 2))
    speeds = rng.random(64)
    assert np.array_equal(pnsga3_select(objs, speeds, 32), pnsga3_select(objs.copy(), speeds.copy(), 32))
