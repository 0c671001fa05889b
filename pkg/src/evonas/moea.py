"""Pareto domination, non-dominated sorting, reference-direction niching and the protected two-sort merge.

Everything here works on plain ``(n, M)`` float arrays of minimized
objectives; :class:`~evonas.objectives.ObjectiveVector` is accepted where a
single vector is expected.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Sequence

import numpy as np

from .errors import StructuralError, UsageError
from .objectives import ObjectiveVector


def _vec(a) -> np.ndarray:
    return a.as_array() if isinstance(a, ObjectiveVector) else np.asarray(a, dtype=np.float64)


def dominates(a, b) -> bool:
    """``a`` is no worse than ``b`` everywhere and strictly better somewhere."""
    if isinstance(a, ObjectiveVector) and isinstance(b, ObjectiveVector) and a.labels != b.labels:
        raise StructuralError(f"objective labels differ: {a.labels} vs {b.labels}")
    x, y = _vec(a), _vec(b)
    if x.shape != y.shape or x.ndim != 1:
        raise StructuralError(f"objective vectors of shapes {x.shape} and {y.shape} are not comparable")
    return bool(np.all(x <= y) and np.any(x < y))


def domination_matrix(objs: np.ndarray) -> np.ndarray:
    """``D[i, j]`` is True when row ``i`` dominates row ``j``."""
    f = np.asarray(objs, dtype=np.float64)
    le = np.all(f[:, None, :] <= f[None, :, :], axis=2)
    lt = np.any(f[:, None, :] < f[None, :, :], axis=2)
    return le & lt


@dataclass(frozen=True)
class FrontSet:
    fronts: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.fronts)

    def __getitem__(self, i: int) -> tuple[int, ...]:
        return self.fronts[i]

    def rank(self, n: int) -> np.ndarray:
        r = np.empty(n, dtype=np.int64)
        for i, f in enumerate(self.fronts):
            r[list(f)] = i
        return r


def nondominated_sort(objs: np.ndarray) -> FrontSet:
    """Peel successive non-dominated sets; members keep input order within a front."""
    f = np.asarray(objs, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise StructuralError(f"need a non-empty (n, M) objective array, got shape {f.shape}")
    d = domination_matrix(f)
    count = d.sum(axis=0)
    remaining = np.ones(len(f), dtype=bool)
    fronts = []
    while remaining.any():
        front = np.flatnonzero(remaining & (count == 0))
        fronts.append(tuple(int(i) for i in front))
        remaining[front] = False
        count = count - d[front].sum(axis=0)
    return FrontSet(tuple(fronts))


# ---------------------------------------------------------------- reference directions

def das_dennis(m: int, divisions: int) -> np.ndarray:
    """All points of the ``m``-simplex lattice with ``divisions`` steps, lexicographic order."""
    if m < 1 or divisions < 0:
        raise StructuralError("need m >= 1 and divisions >= 0")
    out = []

    def rec(prefix: list[int], left: int, depth: int):
        if depth == m - 1:
            out.append(prefix + [left])
            return
        for i in range(left, -1, -1):
            rec(prefix + [i], left - i, depth + 1)

    rec([], divisions, 0)
    arr = np.array(out, dtype=np.float64)
    return arr / divisions if divisions else np.full((1, m), 1.0 / m)


def reference_directions(m: int, at_least: int) -> np.ndarray:
    """Smallest Das-Dennis lattice with at least ``at_least`` directions."""
    p = 1
    while comb(p + m - 1, m - 1) < at_least:
        p += 1
    return das_dennis(m, p)


def _normalize(points: np.ndarray, first_front: np.ndarray) -> np.ndarray:
    ideal = points.min(axis=0)
    scale = first_front.max(axis=0) - ideal
    fallback = points.max(axis=0) - ideal
    scale = np.where(scale > 1e-12, scale, fallback)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return (points - ideal) / scale


def associate(normed: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest direction (by perpendicular distance) and that distance for each point."""
    u = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    proj = normed @ u.T
    sq = (normed ** 2).sum(axis=1, keepdims=True) - proj ** 2
    dist = np.sqrt(np.maximum(sq, 0.0))
    # round so that float noise never decides an association tie
    dist = np.round(dist, 12)
    niche = dist.argmin(axis=1)
    return niche, dist[np.arange(len(normed)), niche]


def niche_select(front: np.ndarray, k: int, dirs: np.ndarray, selected: np.ndarray | None = None) -> list[int]:
    """Choose ``k`` rows of ``front`` filling the least-crowded reference niches first.

    ``selected`` holds objective rows already chosen; they count toward niche
    occupancy and toward the normalization.  Returns positions into ``front``,
    in pick order.
    """
    front = np.asarray(front, dtype=np.float64)
    n = len(front)
    if not 0 < k <= n:
        raise UsageError(f"cannot pick k={k} from a front of {n}")
    if k == n:
        return list(range(n))
    sel = np.zeros((0, front.shape[1])) if selected is None or len(selected) == 0 else np.asarray(selected, float)
    pts = np.vstack([sel, front])
    first = pts[list(nondominated_sort(pts)[0])]
    niche, dist = associate(_normalize(pts, first), dirs)
    counts = np.bincount(niche[:len(sel)], minlength=len(dirs))
    f_niche, f_dist = niche[len(sel):], dist[len(sel):]
    avail = np.ones(n, dtype=bool)
    picked = []
    while len(picked) < k:
        live = np.unique(f_niche[avail])
        j = live[np.argmin(counts[live])]  # lowest direction index among the least crowded
        cand = np.flatnonzero(avail & (f_niche == j))
        best = cand[np.lexsort((cand, f_dist[cand]))[0]]
        picked.append(int(best))
        avail[best] = False
        counts[j] += 1
    return picked


# ---------------------------------------------------------------- environmental selection

def nsga3_select(objs: np.ndarray, P: int, dirs: np.ndarray | None = None) -> np.ndarray:
    """Keep ``P`` rows front by front, cutting the last front by niching.  Returns sorted indices."""
    f = np.asarray(objs, dtype=np.float64)
    if len(f) < P:
        raise UsageError(f"population of {len(f)} is smaller than P={P}")
    dirs = reference_directions(f.shape[1], P) if dirs is None else dirs
    chosen: list[int] = []
    for front in nondominated_sort(f).fronts:
        if len(chosen) + len(front) <= P:
            chosen.extend(front)
            if len(chosen) == P:
                break
            continue
        front = list(front)
        pick = niche_select(f[front], P - len(chosen), dirs, f[chosen])
        chosen.extend(front[i] for i in pick)
        break
    return np.array(sorted(chosen), dtype=np.int64)


def speed_objectives(objs: np.ndarray, speeds: Sequence[float], error_col: int = 0) -> np.ndarray:
    """Objectives of the second sort: error replaced by negated accuracy speed."""
    q = np.array(objs, dtype=np.float64, copy=True)
    q[:, error_col] = -np.asarray(speeds, dtype=np.float64)
    return q


def merged_layers(objs: np.ndarray, speeds: Sequence[float], error_col: int = 0) -> list[list[int]]:
    """Layer ``i`` is ``R_i | Q_i`` minus everything in earlier layers."""
    r = nondominated_sort(objs).fronts
    q = nondominated_sort(speed_objectives(objs, speeds, error_col)).fronts
    seen: set[int] = set()
    layers = []
    for i in range(max(len(r), len(q))):
        layer = set(r[i] if i < len(r) else ()) | set(q[i] if i < len(q) else ())
        new = sorted(layer - seen)
        seen |= layer
        if new:
            layers.append(new)
    return layers


def pnsga3_select(objs: np.ndarray, speeds: Sequence[float], P: int, error_col: int = 0,
                  dirs: np.ndarray | None = None) -> np.ndarray:
    """Protected selection over the union of objective fronts and speed fronts.

    Layers ``R_i | Q_i`` are accumulated until they hold at least ``P``
    individuals; the layer that crosses ``P`` is cut by niching on the
    first-sort objectives.  Returns sorted indices.
    """
    f = np.asarray(objs, dtype=np.float64)
    if len(f) < P:
        raise UsageError(f"population of {len(f)} is smaller than P={P}")
    if len(speeds) != len(f):
        raise StructuralError("one speed per individual required")
    dirs = reference_directions(f.shape[1], P) if dirs is None else dirs
    chosen: list[int] = []
    for layer in merged_layers(f, speeds, error_col):
        if len(chosen) + len(layer) <= P:
            chosen.extend(layer)
            if len(chosen) == P:
                break
            continue
        pick = niche_select(f[layer], P - len(chosen), dirs, f[chosen])
        chosen.extend(layer[i] for i in pick)
        break
    return np.array(sorted(chosen), dtype=np.int64)
