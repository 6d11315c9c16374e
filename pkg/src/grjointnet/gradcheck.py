"""Central finite-difference checks of every differentiable operation.

The error reported for a check is the norm-wise relative error
``max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|)`` over
the probed coordinates. Operations are reduced to scalars through a fixed
random projection ``sum(out * R)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ModelConfig
from .core import make_rng
from .data import synth_dataset
from .gridding import cubic_feature_sampling, gridding, gridding_reverse
from .losses import chamfer, combined_loss, cross_entropy, gridding_loss
from .network import forward, init_params

STEP = 1e-5
LINEAR_TOL = 1e-6
SMOOTH_TOL = 1e-4
NETWORK_TOL = 1e-3
N_SEEDS = 5


@dataclass
class SuiteResult:
    name: str
    max_error: float
    threshold: float
    seeds: int

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.threshold)


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _evaluate(fn, arrays):
    return float(fn([Tensor(a) for a in arrays]).data)


def check_gradients(fn: Callable, arrays, rng=None, max_probes: int = 24,
                    h: float = STEP, kink_tol: float | None = None):
    """Compare tape gradients of scalar ``fn(tensors)`` with central differences.

    Returns the relative error, or ``None`` when ``kink_tol`` is given and the
    two one-sided differences of some probe disagree by more than it
    (the function is not smooth there, so the caller should redraw).
    """
    rng = rng if rng is not None else make_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(tensors)
    tape.backward(out, tensors)
    base = float(out.data)
    analytic, numeric = [], []
    for k, arr in enumerate(arrays):
        flat_count = arr.size
        picks = (np.arange(flat_count) if flat_count <= max_probes
                 else rng.choice(flat_count, size=max_probes, replace=False))
        for idx in picks:
            pos = np.unravel_index(idx, arr.shape)
            orig = arr[pos]
            arr[pos] = orig + h
            fp = _evaluate(fn, arrays)
            arr[pos] = orig - h
            fm = _evaluate(fn, arrays)
            arr[pos] = orig
            if kink_tol is not None:
                forward_d, backward_d = (fp - base) / h, (base - fm) / h
                if abs(forward_d - backward_d) > kink_tol * max(1.0, abs(forward_d)):
                    return None
            analytic.append(tensors[k].grad[pos])
            numeric.append((fp - fm) / (2 * h))
    return relative_error(analytic, numeric)


def _projected(op, out_shape_rng):
    """Wrap ``op`` so its (array) output is projected to a scalar."""
    cache = {}

    def fn(tensors):
        out = op(tensors)
        if "r" not in cache:
            cache["r"] = out_shape_rng.standard_normal(out.shape)
        return ad.reduce_sum(ad.mul(out, Tensor(cache["r"])))

    return fn


def _away_from_zero(rng, shape):
    return rng.uniform(0.1, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# ---------------------------------------------------------------- suite bodies

def _elementwise(rng):
    shape = tuple(rng.integers(2, 5, size=2))
    a, b, c = (_away_from_zero(rng, shape) for _ in range(3))

    def op(t):
        x = ad.add(ad.mul(t[0], t[1]), ad.scale(t[2], 0.7))
        x = ad.sub(ad.leaky_relu(x), ad.square(t[2]))
        return ad.add(ad.absolute(x), ad.neg(t[0]))

    return _projected(op, rng), [a, b, c], 1e-3


def _linear_elementwise(rng):
    shape = tuple(rng.integers(2, 5, size=2))
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    op = lambda t: ad.sub(ad.add(ad.scale(t[0], -1.3), t[1]), ad.neg(t[0]))
    return _projected(op, rng), [a, b], None


def _matmul(rng):
    m, k, n = rng.integers(2, 6, size=3)
    a, b, bias = rng.standard_normal((m, k)), rng.standard_normal((k, n)), rng.standard_normal(n)
    op = lambda t: ad.bias_add(ad.matmul(t[0], t[1]), t[2])
    return _projected(op, rng), [a, b, bias], None


def _reductions(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((2, 4))

    def op(t):
        x = ad.concat([t[0], t[1]], axis=0)
        return ad.concat([ad.reduce_sum(x, axis=0), ad.reduce_mean(x, axis=0)], axis=0)

    return _projected(op, rng), [a, b], None


def _softmax(rng):
    a = rng.standard_normal((int(rng.integers(2, 5)), int(rng.integers(2, 6))))
    return _projected(lambda t: ad.softmax(t[0]), rng), [a], None


def _conv3d(rng):
    ci, co = rng.integers(1, 4, size=2)
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    x = rng.standard_normal((2, ci, 5, 4, 5))
    w = rng.standard_normal((co, ci, k, k, k))
    op = lambda t: ad.conv3d(t[0], t[1], stride, pad)
    return _projected(op, rng), [x, w], None


def _conv3d_transposed(rng):
    ci, co = rng.integers(1, 4, size=2)
    k = int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x = rng.standard_normal((2, ci, 3, 2, 3))
    w = rng.standard_normal((ci, co, k, k, k))
    op = lambda t: ad.conv3d_transposed(t[0], t[1], stride, pad)
    return _projected(op, rng), [x, w], None


def _max_pool(rng):
    k = int(rng.integers(2, 4))
    x = rng.permutation(2 * 2 * 6 * 6 * 7).reshape(2, 2, 6, 6, 7) * 0.01 \
        + rng.uniform(0, 0.001, size=(2, 2, 6, 6, 7))
    return _projected(lambda t: ad.max_pool3d(t[0], k), rng), [x], None


def _bn_frozen(rng):
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((2, c, 3, 3, 3))
    g, b = rng.standard_normal(c), rng.standard_normal(c)
    op = lambda t: ad.batch_norm(t[0], t[1], t[2], mode="frozen")
    return _projected(op, rng), [x, g, b], None


def _bn_train(rng):
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((3, c, 2, 3, 2))
    g, b = rng.standard_normal(c), rng.standard_normal(c)
    op = lambda t: ad.batch_norm(t[0], t[1], t[2], mode="train")
    return _projected(op, rng), [x, g, b], None


def _off_integer_points(rng, count, n, margin=1e-3):
    out = []
    while len(out) < count:
        p = rng.uniform(-0.95, 0.95, size=3)
        g = (p + 1) / 2 * (n - 1)
        if np.all(np.abs(g - np.round(g)) > margin):
            out.append(p)
    return np.array(out)


def _gridding(rng):
    n = int(rng.integers(3, 7))
    pts = _off_integer_points(rng, int(rng.integers(3, 12)), n)
    return _projected(lambda t: gridding(t[0], n), rng), [pts], 1e-3


def _gridding_reverse(rng):
    n = int(rng.integers(2, 5))
    w = rng.uniform(0.1, 1.0, size=(n, n, n))
    return _projected(lambda t: gridding_reverse(t[0]), rng), [w], None


def _cubic_sampling(rng):
    n = int(rng.integers(2, 5))
    pts = rng.uniform(-1, 1, size=(int(rng.integers(2, 8)), 3))
    f1 = rng.standard_normal((2, n, n, n))
    f2 = rng.standard_normal((1, n, n, n))
    op = lambda t: cubic_feature_sampling(t[0], [t[1], t[2]])
    return _projected(op, rng), [pts, f1, f2], None


def _chamfer(rng):
    a = rng.uniform(-1, 1, size=(int(rng.integers(3, 20)), 3))
    b = rng.uniform(-1, 1, size=(int(rng.integers(3, 20)), 3))
    return (lambda t: chamfer(t[0], t[1])), [a, b], 1e-3


def _cross_entropy(rng):
    p, c = int(rng.integers(2, 8)), int(rng.integers(2, 5))
    z = rng.standard_normal((p, c)) * 2
    targets = rng.integers(0, c, size=p)
    return (lambda t: cross_entropy(t[0], targets)), [z], None


def _gridding_loss(rng):
    n = int(rng.integers(2, 5))
    a = rng.standard_normal((n, n, n))
    b = a + rng.choice([-1, 1], size=a.shape) * rng.uniform(0.05, 1.0, size=a.shape)
    return (lambda t: gridding_loss(t[0], t[1])), [a, b], None


SUITES = {
    "elementwise": (_elementwise, SMOOTH_TOL),
    "elementwise_linear": (_linear_elementwise, LINEAR_TOL),
    "matmul_bias": (_matmul, LINEAR_TOL),
    "reduce_concat": (_reductions, LINEAR_TOL),
    "softmax": (_softmax, SMOOTH_TOL),
    "conv3d": (_conv3d, LINEAR_TOL),
    "conv3d_transposed": (_conv3d_transposed, LINEAR_TOL),
    "max_pool3d": (_max_pool, LINEAR_TOL),
    "batch_norm_frozen": (_bn_frozen, LINEAR_TOL),
    "batch_norm_train": (_bn_train, SMOOTH_TOL),
    "gridding": (_gridding, SMOOTH_TOL),
    "gridding_reverse": (_gridding_reverse, SMOOTH_TOL),
    "cubic_feature_sampling": (_cubic_sampling, LINEAR_TOL),
    "chamfer": (_chamfer, SMOOTH_TOL),
    "cross_entropy": (_cross_entropy, SMOOTH_TOL),
    "gridding_loss": (_gridding_loss, LINEAR_TOL),
}


def run_suite(name: str, seed: int = 0, seeds: int = N_SEEDS, max_redraws: int = 20) -> SuiteResult:
    build, tol = SUITES[name]
    worst = 0.0
    done = 0
    attempt = 0
    while done < seeds:
        if attempt >= seeds + max_redraws:
            raise RuntimeError(f"{name}: too many non-smooth draws")
        rng = make_rng(seed * 1000 + attempt)
        attempt += 1
        fn, arrays, kink_tol = build(rng)
        err = check_gradients(fn, arrays, rng, kink_tol=kink_tol)
        if err is None:
            continue
        worst = max(worst, err)
        done += 1
    return SuiteResult(name, worst, tol, done)


def network_gradcheck(seed: int = 0, probes: int = 5, config=None) -> SuiteResult:
    """Combined-loss gradient of a frozen-norm desk network vs central differences."""

    cfg = config or ModelConfig(k_sparse=64, r_dense=2, fc_dims=(64, 64), mlp_hidden=(32,))
    params = init_params(cfg, make_rng(seed))
    pair = synth_dataset(count=1, points_per_part=48, seed=seed)[0]
    gt_grid = gridding(pair.complete.points, cfg.resolution)

    def loss():
        out = forward(params, cfg, pair.partial, make_rng(seed + 1), norm="frozen")
        total, _ = combined_loss(out.sparse[0], out.dense[0], out.grid[0],
                                 out.sparse_logits[0], out.dense_logits[0],
                                 pair.complete, gt_grid)
        return total

    tensors = list(params.tensors.values())
    with Tape() as tape:
        total = loss()
    tape.backward(total, tensors)
    base = float(total.data)
    rng = make_rng(seed + 2)
    candidates = [(k, i) for k, t in enumerate(tensors)
                  for i in np.flatnonzero(np.abs(t.grad) > 1e-6)]
    analytic, numeric = [], []
    for j in rng.permutation(len(candidates)):
        if len(analytic) == probes:
            break
        k, i = candidates[j]
        t = tensors[k]
        pos = np.unravel_index(i, t.shape)
        orig = t.data[pos]
        t.data[pos] = orig + STEP
        fp = float(loss().data)
        t.data[pos] = orig - STEP
        fm = float(loss().data)
        t.data[pos] = orig
        fwd, bwd = (fp - base) / STEP, (base - fm) / STEP
        if abs(fwd - bwd) > 1e-2 * max(1e-3, abs(fwd)):
            continue
        a, n = t.grad[pos], (fp - fm) / (2 * STEP)
        analytic.append(a)
        numeric.append(n)
    errs = [abs(a - n) / max(abs(a), abs(n)) for a, n in zip(analytic, numeric)]
    # one seed; ``errs`` holds one entry per probed parameter
    return SuiteResult("network_end_to_end", max(errs) if errs else float("inf"),
                       NETWORK_TOL, 1)


def run_all(seed: int = 0, include_network: bool = True) -> list[SuiteResult]:
    results = [run_suite(name, seed) for name in SUITES]
    if include_network:
        results.append(network_gradcheck(seed))
    return results


def format_table(results) -> str:
    lines = ["suite\tmax_rel_error\tthreshold\tseeds\tstatus"]
    for r in results:
        lines.append(f"{r.name}\t{r.max_error:.3e}\t{r.threshold:.0e}\t{r.seeds}\t"
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
