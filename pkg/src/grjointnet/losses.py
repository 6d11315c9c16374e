"""Chamfer, cross-entropy and gridding losses, label transfer, combined loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, record_op
from .errors import EmptyCloud, LabelRange, ShapeError


def _coords(x) -> np.ndarray:
    if hasattr(x, "points"):
        return np.asarray(x.points)
    return as_tensor(x).data.reshape(-1, 3)


def squared_distances(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``|q - r|^2`` summed as ``(dx*dx + dy*dy) + dz*dz`` over broadcast pairs."""
    d = q - r
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_brute(queries, refs, block: int = 1024):
    """Exhaustive nearest neighbor: ``(index, squared distance)`` per query."""
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    idx = np.empty(len(q), dtype=np.int64)
    dist = np.empty(len(q))
    for start in range(0, len(q), block):
        d = squared_distances(q[start:start + block, None, :], r[None, :, :])
        j = np.argmin(d, axis=1)
        idx[start:start + block] = j
        dist[start:start + block] = d[np.arange(len(j)), j]
    return idx, dist


class SpatialHash:
    """Uniform grid of buckets over the reference cloud's bounding box.

    The cell edge is ``L / n^(1/3)`` (``L`` the largest bbox side), i.e.
    ``2 / n^(1/3)`` for a cloud spanning the normalized cube. Queries search
    Chebyshev shells of cells outward and stop once the best distance is
    strictly below a lower bound for every unsearched shell, so results
    match :func:`nearest_brute` including lowest-index tie breaking. After
    ``r`` shells the bound is ``|q - p|^2 + (r h)^2`` with ``p`` the
    projection of the query onto the grid box.
    """

    def __init__(self, refs):
        r = np.asarray(refs, dtype=np.float64)
        if len(r) == 0:
            raise EmptyCloud("spatial hash over an empty cloud")
        self.refs = r
        self.lo = r.min(axis=0)
        extent = r.max(axis=0) - self.lo
        side = float(extent.max())
        self.h = side / len(r) ** (1 / 3) if side > 0 else 1.0
        self.dims = np.maximum(np.floor(extent / self.h).astype(np.int64) + 1, 1)
        cells = self._cell(r)
        keys = self._key(cells)
        self.order = np.argsort(keys, kind="stable")
        sorted_keys = keys[self.order]
        ncell = int(np.prod(self.dims))
        self.start = np.searchsorted(sorted_keys, np.arange(ncell), side="left")
        self.end = np.searchsorted(sorted_keys, np.arange(ncell), side="right")

    def _cell(self, pts):
        c = np.floor((pts - self.lo) / self.h).astype(np.int64)
        return np.clip(c, 0, self.dims - 1)

    def _key(self, cells):
        return (cells[..., 2] * self.dims[1] + cells[..., 1]) * self.dims[0] + cells[..., 0]

    @staticmethod
    def _shell(r: int) -> np.ndarray:
        rng = np.arange(-r, r + 1)
        off = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), -1).reshape(-1, 3)
        return off[np.abs(off).max(axis=1) == r]

    def query(self, queries):
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        best_i = np.full(len(q), -1, dtype=np.int64)
        best_d = np.full(len(q), np.inf)
        hi = self.lo + self.dims * self.h
        outside = q - np.clip(q, self.lo, hi)
        box_d = squared_distances(outside, 0.0)
        home = self._cell(q)
        pending = np.arange(len(q))
        max_r = int(self.dims.max())
        r = 0
        while len(pending):
            offsets = self._shell(r)
            cells = home[pending, None, :] + offsets[None]
            valid = np.all((cells >= 0) & (cells < self.dims), axis=-1)
            keys = np.where(valid, self._key(np.clip(cells, 0, self.dims - 1)), 0)
            lengths = np.where(valid, self.end[keys] - self.start[keys], 0).ravel()
            total = int(lengths.sum())
            if total:
                owner = np.repeat(np.repeat(np.arange(len(pending)), len(offsets)), lengths)
                first = np.cumsum(lengths) - lengths
                within = np.arange(total) - np.repeat(first, lengths)
                slot = np.repeat(self.start[keys].ravel(), lengths) + within
                cand = self.order[slot]
                d = squared_distances(q[pending[owner]], self.refs[cand])
                # candidates arrive grouped by owner: segmented min, then lowest index
                starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
                own = owner[starts]
                dd = np.minimum.reduceat(d, starts)
                seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, total]))
                c = np.minimum.reduceat(np.where(d == dd[seg], cand, len(self.refs)), starts)
                tgt = pending[own]
                better = (dd < best_d[tgt]) | ((dd == best_d[tgt]) & (c < best_i[tgt]))
                best_d[tgt[better]] = dd[better]
                best_i[tgt[better]] = c[better]
            bound = r * self.h
            done = best_d[pending] < box_d[pending] + bound * bound
            if r >= max_r:
                done[:] = True
            pending = pending[~done]
            r += 1
        return best_i, best_d


BRUTE_PAIRS = 1 << 20


def nearest_neighbors(queries, refs, method: str = "auto"):
    """Nearest point of ``refs`` for each query; ties go to the lowest index.

    ``auto`` uses the exhaustive search up to ``BRUTE_PAIRS`` query/ref
    pairs and the spatial hash beyond; both give identical answers.
    """
    if len(refs) == 0:
        raise EmptyCloud("nearest neighbor search over an empty cloud")
    if method == "auto":
        method = "brute" if len(queries) * len(refs) <= BRUTE_PAIRS else "hash"
    if method == "brute":
        return nearest_brute(queries, refs)
    if method == "hash":
        return SpatialHash(refs).query(queries)
    raise ValueError(f"unknown nearest-neighbor method {method!r}")


def chamfer_terms(g, m, method: str = "auto"):
    """Both one-sided Chamfer means ``(G -> M, M -> G)`` as floats."""
    gp, mp = _coords(g), _coords(m)
    if len(gp) == 0 or len(mp) == 0:
        raise EmptyCloud("chamfer distance of an empty cloud")
    _, dg = nearest_neighbors(gp, mp, method)
    _, dm = nearest_neighbors(mp, gp, method)
    return float(dg.mean()), float(dm.mean())


def chamfer(g, m, method: str = "auto") -> Tensor:
    """Symmetric Chamfer distance with squared L2; differentiable in both clouds."""
    gt, mt = as_tensor(g.points if hasattr(g, "points") else g), \
        as_tensor(m.points if hasattr(m, "points") else m)
    gp, mp = gt.data, mt.data
    if len(gp) == 0 or len(mp) == 0:
        raise EmptyCloud("chamfer distance of an empty cloud")
    ig, dg = nearest_neighbors(gp, mp, method)
    im, dm = nearest_neighbors(mp, gp, method)
    value = dg.mean() + dm.mean()

    def backward(grad):
        s = float(grad)
        diff_g = (gp - mp[ig]) * (2.0 * s / len(gp))
        diff_m = (mp - gp[im]) * (2.0 * s / len(mp))
        dgrad = diff_g.copy()
        np.add.at(dgrad, im, -diff_m)
        mgrad = diff_m.copy()
        np.add.at(mgrad, ig, -diff_g)
        return dgrad, mgrad

    return record_op(np.asarray(value, dtype=gp.dtype), (gt, mt), backward)


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]`` (max-shifted)."""
    z = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if z.ndim != 2 or z.shape[0] != len(t):
        raise ShapeError(f"logits {z.shape} do not match {len(t)} targets")
    if len(t) and (t.min() < 0 or t.max() >= z.shape[1]):
        raise LabelRange(f"targets must lie in [0, {z.shape[1]})")
    if len(t) == 0:
        return record_op(np.asarray(0.0, dtype=z.dtype), (z,), lambda g: (np.zeros_like(z.data),))
    logp = log_softmax_rows(z.data)
    rows = np.arange(len(t))
    nll = -logp[rows, t]
    # mean about the first row: identical rows average to that row exactly
    value = nll[0] + (nll - nll[0]).mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        return (grad * (float(g) / len(t)),)

    return record_op(np.asarray(value, dtype=z.dtype), (z,), backward)


def gridding_loss(pred, gt) -> Tensor:
    """Mean absolute difference of two equally sized grids."""
    p = as_tensor(pred.weights if hasattr(pred, "weights") else pred)
    q = as_tensor(gt.weights if hasattr(gt, "weights") else gt)
    if p.shape != q.shape:
        raise ShapeError(f"grid resolution mismatch: {p.shape} vs {q.shape}")
    diff = p.data - q.data
    value = np.abs(diff).mean()

    def backward(g):
        sg = np.sign(diff) * (float(g) / diff.size)
        return sg, -sg

    return record_op(np.asarray(value, dtype=p.dtype), (p, q), backward)


def transfer_labels(generated, gt_points, gt_labels=None, method: str = "auto") -> np.ndarray:
    """Label of the nearest ground-truth point for every generated point."""
    if gt_labels is None:
        gt_labels = gt_points.labels
        gt_points = gt_points.points
    gpts = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(gpts) == 0:
        raise EmptyCloud("label transfer from an empty cloud")
    pts = _coords(generated)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    idx, _ = nearest_neighbors(pts, gpts, method)
    return np.asarray(gt_labels, dtype=np.int64)[idx]


@dataclass
class LossWeights:
    chamfer: float = 1.0
    cross_entropy: float = 1.0
    gridding: float = 1.0


def combined_loss(sparse, dense, pred_grid, sparse_logits, dense_logits, gt,
                  gt_grid, weights: LossWeights | None = None,
                  dense_ce: bool = True, method: str = "auto"):
    """``CD(sparse) + CD(dense) + CE(sparse) + CE(dense) + L1(grid)`` for one sample.

    ``gt`` is the labeled complete cloud and ``gt_grid`` its gridding. The
    cross-entropy targets come from :func:`transfer_labels`. Returns the
    scalar tensor and a dict of the weighted per-term values.
    """
    w = weights or LossWeights()
    gt_t = Tensor(np.asarray(gt.points, dtype=as_tensor(sparse).dtype))
    terms = {
        "cd_sparse": (w.chamfer, chamfer(sparse, gt_t, method)),
        "cd_dense": (w.chamfer, chamfer(dense, gt_t, method)),
        "ce_sparse": (w.cross_entropy, cross_entropy(
            sparse_logits, transfer_labels(sparse, gt.points, gt.labels, method))),
    }
    if dense_ce:
        terms["ce_dense"] = (w.cross_entropy, cross_entropy(
            dense_logits, transfer_labels(dense, gt.points, gt.labels, method)))
    terms["grid"] = (w.gridding, gridding_loss(pred_grid, gt_grid))
    total = None
    report = {}
    for name, (weight, value) in terms.items():
        contrib = value * weight
        report[name] = float(contrib.data)
        total = contrib if total is None else total + contrib
    return total, report
