"""Value types, coordinate conventions and the seeded RNG.

Points live in the normalized cube [-1, 1]^3. Grids of resolution N store
N^3 vertex values x-major (flat index ``z * N**2 + y * N + x``), which is the
C order of an array shaped ``(N, N, N)`` indexed ``[z, y, x]``. Point arrays
are ``(P, 3)`` with columns ``(x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloud, LabelRange, ShapeError

NORMALIZE_EPS = 1e-6


def make_rng(seed: int) -> np.random.Generator:
    """Return the package's generator: numpy's PCG64 seeded with ``seed``.

    PCG64 (O'Neill 2014, 128-bit LCG with XSL-RR output) produces the same
    stream on every platform for a given seed.
    """
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


def derive_seed(*parts: int) -> int:
    """Combine integers into one 64-bit seed through ``SeedSequence``."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"points must have shape (P, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class LabeledPointCloud(PointCloud):
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        if self.labels is None:
            raise ValueError("LabeledPointCloud requires labels")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != self.points.shape[0]:
            raise ShapeError(
                f"{labels.shape[0]} labels for {self.points.shape[0]} points")
        if labels.size and labels.min() < 0:
            raise LabelRange("negative label")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def check_labels(self, n_categories: int) -> None:
        if self.labels.size and self.labels.max() >= n_categories:
            raise LabelRange(
                f"label {int(self.labels.max())} >= category count {n_categories}")

    def unlabeled(self) -> PointCloud:
        return PointCloud(self.points)


@dataclass(frozen=True)
class FeatureGrid:
    """``C_f`` channels over ``N^3`` vertices, stored ``(C_f, N, N, N)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4 or not (v.shape[1] == v.shape[2] == v.shape[3]):
            raise ShapeError(f"feature grid must be (C, N, N, N), got {v.shape}")
        if v.shape[1] < 2:
            raise ShapeError("grid resolution must be at least 2")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def resolution(self) -> int:
        return self.values.shape[1]


class ScalarGrid(FeatureGrid):
    """Single-channel grid; ``weights`` is the ``(N, N, N)`` view."""

    def __init__(self, values):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            n = round(v.size ** (1 / 3))
            if n ** 3 != v.size:
                raise ShapeError(f"{v.size} values is not a cube")
            v = v.reshape(n, n, n)
        if v.ndim == 3:
            v = v[None]
        if v.ndim != 4 or v.shape[0] != 1:
            raise ShapeError(f"scalar grid must be (N, N, N), got {v.shape}")
        super().__init__(v)

    @property
    def weights(self) -> np.ndarray:
        return self.values[0]

    def vertex(self, i: int) -> tuple[int, int, int]:
        """Integer vertex coordinates ``(x, y, z)`` of flat index ``i``."""
        n = self.resolution
        z, rem = divmod(int(i), n * n)
        y, x = divmod(rem, n)
        return x, y, z


@dataclass(frozen=True)
class GridCoordMap:
    """Affine map between the normalized cube and grid coordinates.

    ``g(p) = (p + 1) / 2 * (N - 1)`` puts vertices at integers ``0 .. N-1``
    with unit cell edge.
    """

    resolution: int

    def __post_init__(self):
        if self.resolution < 2:
            raise ShapeError("grid resolution must be at least 2")

    def to_grid(self, p):
        return (np.asarray(p, dtype=np.float64) + 1.0) * (0.5 * (self.resolution - 1))

    def to_normalized(self, g):
        return np.asarray(g, dtype=np.float64) * (2.0 / (self.resolution - 1)) - 1.0

    def cell(self, p) -> np.ndarray:
        """Lower-corner cell index, clamped to ``[0, N-2]``."""
        g = self.to_grid(p)
        return np.clip(np.floor(g), 0, self.resolution - 2).astype(np.int64)


def grid_coord(p, resolution: int) -> np.ndarray:
    return GridCoordMap(resolution).to_grid(p)


def cell_index(p, resolution: int) -> np.ndarray:
    return GridCoordMap(resolution).cell(p)


@dataclass(frozen=True)
class Normalization:
    """``normalized = (p - center) * scale``."""

    scale: float
    center: tuple[float, float, float]

    def apply(self, points) -> np.ndarray:
        pts = _as_points(points)
        out = (pts - np.asarray(self.center)) * self.scale
        return np.clip(out, -1.0 + NORMALIZE_EPS, 1.0 - NORMALIZE_EPS)

    def invert(self, points) -> np.ndarray:
        pts = _as_points(points)
        return pts / self.scale + np.asarray(self.center)


def fit_normalization(points, eps: float = NORMALIZE_EPS) -> Normalization:
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    center = pts.mean(axis=0)
    extent = float(np.max(np.abs(pts - center)))
    scale = (1.0 - eps) / extent if extent > 0 else 1.0
    return Normalization(scale, tuple(float(c) for c in center))


def normalize_cloud(cloud):
    """Uniformly scale ``cloud`` about its centroid into ``[-1+eps, 1-eps]^3``.

    Returns ``(normalized_cloud, scale, center)``. Labels are kept when the
    input is labeled.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
    t = fit_normalization(pts)
    out = t.apply(pts)
    if isinstance(cloud, LabeledPointCloud):
        normed = LabeledPointCloud(out, cloud.labels)
    else:
        normed = PointCloud(out)
    return normed, t.scale, t.center


def denormalize_cloud(cloud, scale: float, center):
    t = Normalization(scale, tuple(center))
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    out = t.invert(pts)
    if isinstance(cloud, LabeledPointCloud):
        return LabeledPointCloud(out, cloud.labels)
    return PointCloud(out)
