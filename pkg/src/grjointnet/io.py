"""Readers and writers for clouds (.xyz), grids (GRJG) and checkpoints (GRJP).

Binary layouts, all little-endian:

grid::

    b"GRJG" | u16 version=1 | u16 reserved=0 | u32 N | u32 C_f | f32[C_f*N^3]

checkpoint::

    b"GRJP" | u16 version=1 | u32 entry count
    per entry: u16 name length | utf-8 name | u8 rank | u32[rank] extents | f32 data
    optional trailer: b"GRJC" | u32 byte length | utf-8 "key=value" lines
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import FeatureGrid, LabeledPointCloud, PointCloud, ScalarGrid
from .errors import ParseError

GRID_MAGIC = b"GRJG"
CKPT_MAGIC = b"GRJP"
TRAILER_MAGIC = b"GRJC"
FORMAT_VERSION = 1


def read_cloud(path, n_categories: int | None = None):
    """Read an ``.xyz`` file: ``x y z`` or ``x y z label`` per line.

    Returns a :class:`LabeledPointCloud` when every line carries a label,
    a :class:`PointCloud` otherwise.
    """
    points, labels = [], []
    arity = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise ParseError(f"expected 3 or 4 fields, got {len(fields)}",
                                 line=lineno, path=path)
            if arity is None:
                arity = len(fields)
            elif len(fields) != arity:
                raise ParseError("inconsistent label column", line=lineno, path=path)
            try:
                xyz = [float(f) for f in fields[:3]]
            except ValueError:
                raise ParseError(f"bad coordinate in {line!r}", line=lineno,
                                 path=path) from None
            if not all(np.isfinite(xyz)):
                raise ParseError("non-finite coordinate", line=lineno, path=path)
            points.append(xyz)
            if arity == 4:
                try:
                    labels.append(int(fields[3]))
                except ValueError:
                    raise ParseError(f"bad label {fields[3]!r}", line=lineno,
                                     path=path) from None
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if arity == 4:
        cloud = LabeledPointCloud(pts, np.asarray(labels, dtype=np.int64))
        if n_categories is not None:
            cloud.check_labels(n_categories)
        return cloud
    return PointCloud(pts)


def write_cloud(cloud, path, labels=None) -> None:
    """Write ``cloud`` with 17 significant digits so reading it back is exact."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if labels is None and isinstance(cloud, LabeledPointCloud):
        labels = cloud.labels
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if labels is None:
            for x, y, z in pts:
                fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        else:
            for (x, y, z), lab in zip(pts, labels):
                fh.write(f"{x:.17g} {y:.17g} {z:.17g} {int(lab)}\n")


def write_grid(grid, path) -> None:
    values = grid.values if isinstance(grid, FeatureGrid) else np.asarray(grid)
    if values.ndim == 3:
        values = values[None]
    c, n = values.shape[0], values.shape[1]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<HHII", FORMAT_VERSION, 0, n, c))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_grid(path):
    """Return a :class:`ScalarGrid` for one channel, else a :class:`FeatureGrid`."""
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise ParseError("not a GRJG grid file", path=path)
    version, _reserved, n, c = struct.unpack_from("<HHII", data, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported grid version {version}", path=path)
    count = c * n ** 3
    body = data[16:]
    if len(body) != 4 * count:
        raise ParseError(f"expected {count} floats, found {len(body) // 4}", path=path)
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(c, n, n, n)
    return ScalarGrid(values[0]) if c == 1 else FeatureGrid(values)


def write_checkpoint(path, tensors: dict, manifest: dict | None = None) -> None:
    """Serialize named arrays; ``manifest`` goes into the key=value trailer."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HI", FORMAT_VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if manifest:
        text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
        out += TRAILER_MAGIC + struct.pack("<I", len(text)) + text
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, manifest)``; arrays are float64 copies of the f32 data."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ParseError("not a GRJP checkpoint", path=path)
    version, count = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=path)
    pos = 10
    tensors = {}
    try:
        for _ in range(count):
            (length,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + length].decode("utf-8")
            pos += length
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
            tensors[name] = arr.astype(np.float64).reshape(shape)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise ParseError(f"truncated checkpoint ({exc})", path=path) from None
    manifest = {}
    if data[pos:pos + 4] == TRAILER_MAGIC:
        (length,) = struct.unpack_from("<I", data, pos + 4)
        text = data[pos + 8:pos + 8 + length].decode("utf-8")
        for line in text.splitlines():
            if line:
                key, _, value = line.partition("=")
                manifest[key] = value
    return tensors, manifest
