"""Synthetic labeled shapes, occlusion-style degradation and dataset loading."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (LabeledPointCloud, Normalization, PointCloud, derive_seed,
                   fit_normalization, make_rng)
from .errors import DegenerateInput, GRJointError, LabelRange
from .io import read_cloud

log = logging.getLogger(__name__)

SHAPE_KINDS = ("barbell", "table", "plane-toy")
PART_MARGIN = 0.05


@dataclass(frozen=True)
class TrainingPair:
    partial: PointCloud
    complete: LabeledPointCloud
    shape_id: str
    category: str
    transform: Normalization | None = None


# ---------------------------------------------------------------- synthesis

def _sphere_surface(rng, n, center, radius):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def _cylinder_x(rng, n, x0, x1, radius):
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    x = rng.uniform(x0, x1, n)
    return np.stack([x, radius * np.cos(theta), radius * np.sin(theta)], axis=1)


def _box_surface(rng, n, lo, hi):
    """Uniform samples on the surface of the axis-aligned box [lo, hi]."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = hi - lo
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
    faces = rng.choice(6, size=n, p=np.repeat(areas, 2) / (2 * areas.sum()))
    pts = lo + rng.uniform(0.0, 1.0, (n, 3)) * size
    axis = faces // 2
    side = faces % 2
    pts[np.arange(n), axis] = np.where(side == 1, hi[axis], lo[axis])
    return pts


def _split(n, k):
    return [n // k + (1 if i < n % k else 0) for i in range(k)]


def _barbell(rng, ppp):
    half = 0.7 * rng.uniform(0.9, 1.1)
    radius = 0.3 * rng.uniform(0.85, 1.15)
    bar = 0.08 * rng.uniform(0.8, 1.2)
    gap = 0.12
    parts = [
        _sphere_surface(rng, ppp, (-half, 0.0, 0.0), radius),
        _cylinder_x(rng, ppp, -half + radius + gap, half - radius - gap, bar),
        _sphere_surface(rng, ppp, (half, 0.0, 0.0), radius),
    ]
    return parts, [0, 1, 2]


def _table(rng, ppp):
    w = 0.8 * rng.uniform(0.85, 1.15)
    d = 0.5 * rng.uniform(0.85, 1.15)
    top_z = 0.35 * rng.uniform(0.9, 1.1)
    thick = 0.06
    leg = 0.07
    gap = 0.12
    top = _box_surface(rng, ppp, (-w, -d, top_z), (w, d, top_z + thick))
    legs = []
    for (sx, sy), count in zip([(-1, -1), (-1, 1), (1, -1), (1, 1)], _split(ppp, 4)):
        cx, cy = sx * (w - leg), sy * (d - leg)
        legs.append(_box_surface(rng, count, (cx - leg / 2, cy - leg / 2, -0.6),
                                 (cx + leg / 2, cy + leg / 2, top_z - gap)))
    return [top] + legs, [0, 1, 1, 1, 1]


def _plane_toy(rng, ppp):
    length = 0.9 * rng.uniform(0.9, 1.1)
    body = 0.12
    span = 0.8 * rng.uniform(0.85, 1.15)
    gap = 0.1
    fuselage = _box_surface(rng, ppp, (-length, -body, -body), (length, body, body))
    n_left, n_right = _split(ppp, 2)
    left = _box_surface(rng, n_left, (-0.25, -span, -0.02), (0.25, -body - gap, 0.02))
    right = _box_surface(rng, n_right, (-0.25, body + gap, -0.02), (0.25, span, 0.02))
    fin = _box_surface(rng, ppp, (-length, -0.02, body + gap), (-length + 0.3, 0.02, 0.45))
    return [fuselage, left, right, fin], [0, 1, 1, 2]


_BUILDERS = {"barbell": _barbell, "table": _table, "plane-toy": _plane_toy}


def _check_disjoint(pieces, labels, margin):
    """Every piece's box must clear the boxes of differently labeled pieces by ``margin``.

    Boxes are taken per connected piece, not per label: the two wings of the
    plane share a label but sit on either side of the fuselage.
    """
    boxes = [(p.min(axis=0), p.max(axis=0)) for p in pieces]
    for i in range(len(pieces)):
        for j in range(i + 1, len(pieces)):
            if labels[i] == labels[j]:
                continue
            gap = np.maximum(boxes[j][0] - boxes[i][1], boxes[i][0] - boxes[j][1]).max()
            if gap < margin:
                raise AssertionError(f"parts {labels[i]} and {labels[j]} are only "
                                     f"{gap:.3f} apart")


def synth_shape(kind: str, points_per_part: int, rng) -> LabeledPointCloud:
    """Sample a labeled toy shape; parts are separated by at least 0.05 after normalization."""
    if kind not in _BUILDERS:
        raise ValueError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    if points_per_part < 1:
        raise ValueError("points_per_part must be >= 1")
    parts, labels = _BUILDERS[kind](rng, points_per_part)
    pts = np.concatenate(parts)
    lab = np.concatenate([np.full(len(p), l) for p, l in zip(parts, labels)])
    t = fit_normalization(pts)
    _check_disjoint([t.apply(p) for p in parts], labels, PART_MARGIN)
    return LabeledPointCloud(pts, lab)


# ---------------------------------------------------------------- degradation

def degrade(complete, mode: str = "halfspace", fraction: float = 0.25, rng=None) -> PointCloud:
    """Drop a contiguous region holding ``round(fraction * n)`` points.

    ``halfspace`` removes the points furthest along a random direction;
    ``sphere`` removes the points nearest a randomly chosen cloud point.
    Survivors keep their original order and exact coordinates.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    rng = rng if rng is not None else make_rng(0)
    pts = complete.points if isinstance(complete, PointCloud) else np.asarray(complete)
    n = len(pts)
    k = int(round(fraction * n))
    if k >= n:
        raise DegenerateInput(f"removing {k} of {n} points leaves nothing")
    if mode == "halfspace":
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        score = pts @ direction
    elif mode == "sphere":
        center = pts[rng.integers(n)]
        score = -np.sum((pts - center) ** 2, axis=1)
    else:
        raise ValueError(f"unknown degrade mode {mode!r}")
    removed = np.argsort(-score, kind="stable")[:k]
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    return PointCloud(pts[keep])


# ---------------------------------------------------------------- pairs

def make_pair(complete: LabeledPointCloud, partial_raw, shape_id: str,
              category: str) -> TrainingPair:
    """Normalize both clouds with the transform fitted on ``complete``."""
    t = fit_normalization(complete.points)
    comp = LabeledPointCloud(t.apply(complete.points), complete.labels)
    part_pts = partial_raw.points if isinstance(partial_raw, PointCloud) else partial_raw
    return TrainingPair(PointCloud(t.apply(part_pts)), comp, shape_id, category, t)


def synth_dataset(kinds=("barbell", "table"), count: int = 64, points_per_part: int = 128,
                  seed: int = 0, degrade_mode: str = "halfspace",
                  degrade_fraction: float = 0.25, offset: int = 0) -> list[TrainingPair]:
    """Shapes ``offset .. offset+count-1``; shape ``i`` depends only on ``(seed, i)``."""
    pairs = []
    for i in range(offset, offset + count):
        kind = kinds[i % len(kinds)]
        rng = make_rng(derive_seed(seed, i))
        complete = synth_shape(kind, points_per_part, rng)
        partial = degrade(complete, degrade_mode, degrade_fraction, rng)
        pairs.append(make_pair(complete, partial, f"{kind}-{i:05d}", kind))
    return pairs


def shape_seed(seed: int, shape_id: str) -> int:
    digest = hashlib.sha256(shape_id.encode("utf-8")).digest()
    return derive_seed(seed, int.from_bytes(digest[:8], "little"))


class ShapeNetPartLoader:
    """Iterate ``<root>/<category>/<shape-id>.xyz`` samples as training pairs.

    Order follows ``<root>/manifest.txt`` (one shape id per line) when
    present, else lexicographic ``category/shape-id``. Missing partner
    ``.partial.xyz`` files are replaced by :func:`degrade` seeded from the
    shape id. Unreadable samples are skipped and counted in ``skipped``.
    """

    def __init__(self, root, n_categories: int, degrade_mode: str = "halfspace",
                 degrade_fraction: float = 0.25, seed: int = 0):
        self.root = Path(root)
        self.n_categories = n_categories
        self.degrade_mode = degrade_mode
        self.degrade_fraction = degrade_fraction
        self.seed = seed
        self.skipped = 0

    def _samples(self):
        found = {}
        for path in sorted(self.root.glob("*/*.xyz")):
            if path.name.endswith(".partial.xyz"):
                continue
            found[path.stem] = path
        manifest = self.root / "manifest.txt"
        if manifest.exists():
            ids = [line.strip() for line in manifest.read_text().splitlines()
                   if line.strip() and not line.startswith("#")]
            missing = [i for i in ids if i not in found]
            for i in missing:
                log.warning("manifest entry %s has no sample file", i)
            self.skipped += len(missing)
            return [found[i] for i in ids if i in found]
        return sorted(found.values(), key=lambda p: (p.parent.name, p.stem))

    def __iter__(self):
        self.skipped = 0
        for path in self._samples():
            shape_id, category = path.stem, path.parent.name
            try:
                complete = read_cloud(path)
                if not isinstance(complete, LabeledPointCloud):
                    raise GRJointError("complete cloud has no labels")
                if len(complete) == 0:
                    raise GRJointError("complete cloud is empty")
            except LabelRange:
                raise
            except (OSError, GRJointError, ValueError) as exc:
                log.warning("skipping %s: %s", path, exc)
                self.skipped += 1
                continue
            complete.check_labels(self.n_categories)
            partner = path.with_name(f"{shape_id}.partial.xyz")
            try:
                if partner.exists():
                    partial = read_cloud(partner)
                else:
                    rng = make_rng(shape_seed(self.seed, shape_id))
                    partial = degrade(complete, self.degrade_mode, self.degrade_fraction, rng)
            except (OSError, GRJointError, ValueError) as exc:
                log.warning("skipping %s: %s", path, exc)
                self.skipped += 1
                continue
            yield make_pair(complete, partial, shape_id, category)


def load_shapenet_part(root, n_categories: int, **kwargs) -> ShapeNetPartLoader:
    return ShapeNetPartLoader(root, n_categories, **kwargs)
