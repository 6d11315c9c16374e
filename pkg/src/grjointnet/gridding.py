"""Differentiable point/grid conversions and the segmentation mapping.

All functions take normalized ``(P, 3)`` point arrays or tensors with
columns ``(x, y, z)`` and grids shaped ``([C,] N, N, N)`` indexed
``[z, y, x]``. The eight corners of a cell are enumerated ``(dz, dy, dx)``
in lexicographic order, i.e. corner ``c = 4*dz + 2*dy + dx``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, concat, record_op
from .core import GridCoordMap, PointCloud, ScalarGrid
from .errors import ConfigError, RangeError, ShapeError

REVERSE_THRESHOLD = 1e-6

CORNERS = np.array([(dz, dy, dx) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
# same offsets as (x, y, z) columns
CORNER_XYZ = CORNERS[:, ::-1]


def _points_tensor(points) -> Tensor:
    if isinstance(points, PointCloud):
        return Tensor(points.points)
    t = as_tensor(points)
    if t.ndim != 2 or t.shape[1] != 3:
        if t.size == 0:
            return Tensor(np.zeros((0, 3), dtype=t.dtype))
        raise ShapeError(f"points must be (P, 3), got {t.shape}")
    return t


def _grid_tensor(grid) -> Tensor:
    if isinstance(grid, ScalarGrid):
        return Tensor(grid.weights)
    return as_tensor(grid)


def cell_corners(points: np.ndarray, n: int):
    """Corner geometry of each point's enclosing cell.

    Returns ``(flat, factors, frac)``: flat vertex indices ``(P, 8)``, the
    per-axis weight factors ``(P, 8, 3)`` (``1 - |v - g|`` per column x, y, z)
    and the fractional offsets ``(P, 3)``. Points on the upper face are
    clamped into the last cell but keep their unclamped offsets.
    """
    cmap = GridCoordMap(n)
    g = cmap.to_grid(points)
    cell = np.clip(np.floor(g), 0, n - 2).astype(np.int64)
    frac = g - cell
    verts = cell[:, None, :] + CORNER_XYZ[None]
    flat = (verts[..., 2] * n + verts[..., 1]) * n + verts[..., 0]
    factors = np.where(CORNER_XYZ[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    return flat, factors, frac


def corner_weights(points, n: int) -> np.ndarray:
    """Trilinear weights ``(P, 8)`` of each point on its cell's corners."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    _, factors, _ = cell_corners(pts, n)
    return factors.prod(axis=-1)


def gridding(points, n: int) -> Tensor:
    """Scatter points onto an ``(N, N, N)`` vertex grid.

    Each point contributes ``prod(1 - |v - g|)`` to the eight corners of its
    cell; a vertex's value is the mean contribution over the points that
    neighbor it (all per-axis distances below one). Differentiable w.r.t.
    the point coordinates away from integer grid coordinates.
    """
    if n < 2:
        raise ShapeError("grid resolution must be at least 2")
    pts = _points_tensor(points)
    data = pts.data
    if data.size and np.max(np.abs(data)) > 1.0:
        raise RangeError("gridding expects points inside [-1, 1]^3")
    flat, factors, _ = cell_corners(data, n)
    w = factors.prod(axis=-1)
    neighbor = np.all(factors > 0, axis=-1)
    sums = np.bincount(flat.ravel(), weights=w.ravel(), minlength=n ** 3)
    counts = np.bincount(flat[neighbor], minlength=n ** 3)
    grid = (sums / np.maximum(counts, 1)).astype(data.dtype).reshape(n, n, n)

    def backward(g):
        gv = g.reshape(-1) / np.maximum(counts, 1)
        coef = np.where(neighbor, gv[flat], 0.0)
        sign = np.where(CORNER_XYZ == 1, 1.0, -1.0)
        dgrid = np.empty_like(data)
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            partial = factors[..., others[0]] * factors[..., others[1]] * sign[:, axis]
            dgrid[:, axis] = (coef * partial).sum(axis=1)
        return (dgrid * (0.5 * (n - 1)),)

    return record_op(grid, (pts,), backward)


def gridding_reverse(grid, threshold: float = REVERSE_THRESHOLD,
                     return_cells: bool = False):
    """Weighted centroid of every cell whose corner-weight sum exceeds ``threshold``.

    Points come back in normalized coordinates, ordered by cell index
    (x fastest). Differentiable w.r.t. the grid values of emitted cells.
    With ``return_cells`` the flat cell indices ``z*(N-1)^2 + y*(N-1) + x``
    are returned as well.
    """
    g = _grid_tensor(grid)
    if g.ndim != 3 or not (g.shape[0] == g.shape[1] == g.shape[2]) or g.shape[0] < 2:
        raise ShapeError(f"gridding_reverse expects an (N, N, N) grid, got {g.shape}")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    n = g.shape[0]
    m = n - 1
    w = g.data
    corners = np.stack([w[dz:dz + m, dy:dy + m, dx:dx + m] for dz, dy, dx in CORNERS],
                       axis=-1).reshape(-1, 8)
    total = corners.sum(axis=1)
    cells = np.flatnonzero(total > threshold)
    cw = corners[cells]
    s = total[cells]
    cz, rem = np.divmod(cells, m * m)
    cy, cx = np.divmod(rem, m)
    base = np.stack([cx, cy, cz], axis=1).astype(w.dtype)
    verts = base[:, None, :] + CORNER_XYZ[None]
    centroid = (cw[..., None] * verts).sum(axis=1) / s[:, None]
    cmap = GridCoordMap(n)
    out = cmap.to_normalized(centroid).astype(w.dtype)

    vz = cz[:, None] + CORNERS[None, :, 0]
    vy = cy[:, None] + CORNERS[None, :, 1]
    vx = cx[:, None] + CORNERS[None, :, 2]
    flat = (vz * n + vy) * n + vx

    def backward(gout):
        dcentroid = gout * (2.0 / (n - 1))
        dw = ((verts - centroid[:, None, :]) * dcentroid[:, None, :]).sum(-1) / s[:, None]
        full = np.bincount(flat.ravel(), weights=dw.ravel(), minlength=n ** 3)
        return (full.reshape(n, n, n).astype(w.dtype),)

    pts = record_op(out.reshape(-1, 3), (g,), backward)
    return (pts, cells) if return_cells else pts


def sample_corner_features(points, features) -> Tensor:
    """Gather the ``C`` features at each point's eight cell corners -> ``(P, 8*C)``.

    Columns are corner-major: corner ``c`` occupies ``[c*C, (c+1)*C)``.
    Linear in ``features``; no gradient reaches the point coordinates.
    """
    f = as_tensor(features)
    if f.ndim == 3:
        f = f.reshape((1,) + f.shape)
    if f.ndim != 4 or not (f.shape[1] == f.shape[2] == f.shape[3]):
        raise ShapeError(f"features must be (C, N, N, N), got {f.shape}")
    c, n = f.shape[0], f.shape[1]
    pts = _points_tensor(points).data
    flat, _, _ = cell_corners(pts, n)
    fmat = f.data.reshape(c, -1)
    out = fmat[:, flat].transpose(1, 2, 0).reshape(len(pts), 8 * c)

    def backward(g):
        g3 = g.reshape(len(pts), 8, c)
        full = np.zeros((c, n ** 3), dtype=g.dtype)
        for ch in range(c):
            full[ch] = np.bincount(flat.ravel(), weights=g3[..., ch].ravel(),
                                   minlength=n ** 3)
        return (full.reshape(f.shape),)

    return record_op(out, (f,), backward)


def cubic_feature_sampling(points, grids) -> Tensor:
    """Per point ``[x, y, z, corner features of grid 1, grid 2, ...]``.

    Every grid must share one resolution; output is ``(P, 3 + 8 * sum C_f)``.
    """
    pts = _points_tensor(points)
    grids = [g.values if hasattr(g, "values") and not isinstance(g, Tensor) else g
             for g in grids]
    grids = [as_tensor(g) for g in grids]
    resolutions = {g.shape[-1] for g in grids}
    if len(resolutions) > 1:
        raise ShapeError(f"feature grids disagree on resolution: {sorted(resolutions)}")
    return concat([pts] + [sample_corner_features(pts, g) for g in grids], axis=1)


def _stack_grids(seg_grids) -> Tensor:
    if isinstance(seg_grids, (list, tuple)):
        if len(seg_grids) == 0:
            raise ConfigError("map_labels needs at least one category grid")
        arrays = [g.weights if isinstance(g, ScalarGrid) else as_tensor(g).data
                  for g in seg_grids]
        if len({a.shape for a in arrays}) > 1:
            raise ShapeError("segmentation grids disagree on resolution")
        return Tensor(np.stack(arrays))
    t = as_tensor(seg_grids)
    if t.ndim != 4:
        raise ShapeError(f"segmentation grids must be (C, N, N, N), got {t.shape}")
    if t.shape[0] == 0:
        raise ConfigError("map_labels needs at least one category grid")
    return t


def cell_values(points, seg_grids) -> Tensor:
    """Values ``BI_n[c_z, c_y, c_x]`` at each point's clamped cell -> ``(P, C)``."""
    grids = _stack_grids(seg_grids)
    c, n = grids.shape[0], grids.shape[1]
    pts = _points_tensor(points).data
    cell = GridCoordMap(n).cell(pts)
    flat = (cell[:, 2] * n + cell[:, 1]) * n + cell[:, 0]
    gmat = grids.data.reshape(c, -1)

    def backward(g):
        full = np.zeros((c, n ** 3), dtype=g.dtype)
        for ch in range(c):
            full[ch] = np.bincount(flat, weights=g[:, ch], minlength=n ** 3)
        return (full.reshape(grids.shape),)

    return record_op(gmat[:, flat].T.copy(), (grids,), backward)


def map_labels(points, seg_grids) -> np.ndarray:
    """Category of each point: argmax over the C grids at its cell (ties -> lowest)."""
    return np.argmax(cell_values(points, seg_grids).data, axis=1)
