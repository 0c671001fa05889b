"""Central finite-difference checks for every layer kind and the masked SuperNet."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .layers import forward_op, op_param_shapes
from .tensor import DTYPE, Tensor

EPS = 1e-3
TOL = 1e-2


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    rel_error: float
    n_checked: int
    tol: float = TOL
    n_kinks: int = 0  # coordinates whose +/- perturbations straddle a ReLU/max kink

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tol


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def one_sided_differences(f: Callable[[], float], arr: np.ndarray, eps: float = EPS,
                          indices: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place).

    Their mean is the central difference.
    """
    flat = arr.reshape(-1)
    fwd = np.zeros(flat.shape, dtype=np.float64)
    bwd = np.zeros(flat.shape, dtype=np.float64)
    f0 = f()
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        # use the perturbations actually representable in float32
        hi = DTYPE(orig + eps)
        lo = DTYPE(orig - eps)
        flat[i] = hi
        f_hi = f()
        flat[i] = lo
        f_lo = f()
        flat[i] = orig
        fwd[i] = (f_hi - f0) / (float(hi) - float(orig))
        bwd[i] = (f0 - f_lo) / (float(orig) - float(lo))
    return fwd.reshape(arr.shape), bwd.reshape(arr.shape)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, eps: float = EPS,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. the float32 array ``arr``."""
    fwd, bwd = one_sided_differences(f, arr, eps, indices)
    return 0.5 * (fwd + bwd)


def kink_aware(analytic: np.ndarray, fwd: np.ndarray, bwd: np.ndarray,
               kink_tol: float = 0.05) -> tuple[np.ndarray, int]:
    """Reference gradient: central difference, or at a kink the one-sided difference nearest ``analytic``.

    A coordinate is at a kink when its two one-sided differences disagree by
    more than ``kink_tol`` relative to their size.  There the function has no
    derivative at the scale of ``eps`` and backprop legitimately returns one
    of the one-sided slopes; a wrong gradient matches neither.
    """
    scale = np.maximum(np.maximum(np.abs(fwd), np.abs(bwd)), 1e-3)
    kink = np.abs(fwd - bwd) > kink_tol * scale
    nearest = np.where(np.abs(analytic - fwd) <= np.abs(analytic - bwd), fwd, bwd)
    return np.where(kink, nearest, 0.5 * (fwd + bwd)), int(kink.sum())


def check_function(name: str, build: Callable[[dict[str, Tensor]], Tensor], leaves: dict[str, np.ndarray],
                   eps: float = EPS, tol: float = TOL) -> GradCheckResult:
    """Compare backprop against finite differences for every entry of every leaf."""
    tensors = {k: Tensor(v.astype(DTYPE), requires_grad=True) for k, v in leaves.items()}
    build(tensors).backward()

    def f() -> float:
        with T.no_grad():
            return float(build(tensors).data)

    analytic, fwds, bwds = [], [], []
    for t in tensors.values():
        analytic.append(t.grad.copy().ravel())
        fw, bw = one_sided_differences(f, t.data, eps)
        fwds.append(fw.ravel())
        bwds.append(bw.ravel())
    a = np.concatenate(analytic)
    ref, kinks = kink_aware(a, np.concatenate(fwds), np.concatenate(bwds))
    return GradCheckResult(name, relative_error(a, ref), a.size, tol, kinks)


def _spaced(rng: np.random.Generator, shape: tuple[int, ...], gap: float = 0.01) -> np.ndarray:
    """Random array with pairwise gaps of at least ``gap`` (keeps max/relu away from kinks)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap * 2.5
    return rng.permutation(vals).reshape(shape).astype(DTYPE)


def layer_checks(seed: int = 0, eps: float = EPS, tol: float = TOL) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    x_shape = (2, 3, 6, 6)

    def weighted():
        r = {}

        def loss(out: Tensor) -> Tensor:
            if "R" not in r:
                r["R"] = rng.standard_normal(out.shape)
            return T.weighted_sum(out, r["R"])

        return loss

    for kind in ("conv3x3", "conv1x1", "sepconv3x3", "sepconv5x5", "maxpool3x3", "avgpool3x3", "skip"):
        for stride in (1, 2):
            shapes = op_param_shapes(kind, x_shape[1])
            leaves = {"x": _spaced(rng, x_shape)}
            for p, s in shapes.items():
                leaves[p] = (rng.standard_normal(s) * 0.5).astype(DTYPE)
            loss = weighted()

            def build(t, kind=kind, stride=stride, loss=loss):
                params = {p: t[p] for p in t if p != "x"}
                return loss(forward_op(kind, t["x"], params, stride))

            results.append(check_function(f"{kind}/stride{stride}", build, leaves, eps, tol))

    loss = weighted()
    results.append(check_function(
        "relu", lambda t: loss(T.relu(t["x"])), {"x": _spaced(rng, x_shape)}, eps, tol))
    loss = weighted()
    results.append(check_function(
        "sample_norm", lambda t: loss(T.sample_norm(t["x"])), {"x": rng.standard_normal(x_shape)}, eps, tol))
    loss = weighted()
    results.append(check_function(
        "global_avg_pool", lambda t: loss(T.global_avg_pool(t["x"])),
        {"x": rng.standard_normal(x_shape).astype(DTYPE)}, eps, tol))
    loss = weighted()
    results.append(check_function(
        "linear", lambda t: loss(T.linear(t["x"], t["w"], t["b"])),
        {"x": rng.standard_normal((4, 5)), "w": rng.standard_normal((3, 5)), "b": rng.standard_normal(3)},
        eps, tol))
    loss = weighted()
    results.append(check_function(
        "add_scale", lambda t: loss(T.scale(T.add(t["a"], t["b"]), 2.0)),
        {"a": rng.standard_normal(x_shape), "b": rng.standard_normal(x_shape)}, eps, tol))
    targets = rng.integers(0, 5, size=4)
    results.append(check_function(
        "cross_entropy", lambda t: T.cross_entropy(t["z"], targets)[0],
        {"z": rng.standard_normal((4, 5))}, eps, tol))
    loss = weighted()
    results.append(check_function(
        "two_layer_net",
        lambda t: loss(T.linear(T.global_avg_pool(T.relu(T.conv2d(
            T.relu(T.conv2d(t["x"], t["w1"], t["b1"], padding=1)), t["w2"], t["b2"], padding=1))),
            t["w3"], t["b3"])),
        {"x": rng.standard_normal((2, 1, 5, 5)), "w1": rng.standard_normal((3, 1, 3, 3)),
         "b1": rng.standard_normal(3) * 0.1, "w2": rng.standard_normal((3, 3, 3, 3)) * 0.5,
         "b2": rng.standard_normal(3) * 0.1, "w3": rng.standard_normal((2, 3)), "b3": np.zeros(2)},
        eps, tol))
    return results


def supernet_checks(seed: int = 0, n_genomes: int = 3, eps: float = EPS, tol: float = TOL) -> list[GradCheckResult]:
    """Masked gradient of sampled networks: FD on active weights, exact zeros elsewhere.

    The zero-gradient result reports the largest absolute gradient found on
    inactive weights as its error (must be exactly 0).
    """
    from ..search_space import SpaceDescriptor, random_genome
    from ..supernet import SuperNet, grad_single
    from .batch import Batch

    rng = np.random.default_rng(seed)
    space = SpaceDescriptor(node_count=2, stack_depth=3, reduction_positions=(1,), stem_channels=3,
                            op_set=("conv3x3", "conv1x1", "sepconv3x3", "maxpool3x3", "avgpool3x3", "skip", "none"))
    net = SuperNet(space, num_classes=3, in_channels=1, rng=seed)
    batch = Batch(rng.standard_normal((3, 1, 6, 6)), rng.integers(0, 3, size=3))
    results = []
    for k in range(n_genomes):
        g = random_genome(space, rng)
        s = net.sample(g)
        grad, _ = grad_single(s, batch)
        active = net.param_mask(s.mask)
        data = net.store.data

        def f() -> float:
            with T.no_grad():
                return float(T.cross_entropy(s.forward(batch.inputs), batch.targets)[0].data)

        idx = np.flatnonzero(active)
        fw, bw = one_sided_differences(f, data, eps, idx)
        ref, kinks = kink_aware(grad[idx], fw[idx], bw[idx])
        results.append(GradCheckResult(f"supernet/genome{k}", relative_error(grad[idx], ref), idx.size, tol, kinks))
        leak = float(np.abs(grad[~active]).max()) if (~active).any() else 0.0
        results.append(GradCheckResult(f"supernet/genome{k}/masked_zero", leak, int((~active).sum()), 0.0))
    return results


def run_suite(seed: int = 0, eps: float = EPS, tol: float = TOL) -> list[GradCheckResult]:
    return layer_checks(seed, eps, tol) + supernet_checks(seed, eps=eps, tol=tol)
