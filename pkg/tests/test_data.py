import logging

import numpy as np
import pytest

from grjointnet.core import LabeledPointCloud, make_rng
from grjointnet.data import degrade, load_shapenet_part, synth_dataset, synth_shape
from grjointnet.errors import DegenerateInput, LabelRange
from grjointnet.io import write_cloud


def as_set(points):
    return {tuple(p) for p in np.asarray(points)}


@pytest.mark.parametrize("kind, parts", [("barbell", 3), ("table", 2), ("plane-toy", 3)])
def test_synth_histogram(kind, parts):
    cloud = synth_shape(kind, 100, make_rng(0))
    assert np.bincount(cloud.labels).tolist() == [100] * parts


def test_barbell_counts():
    cloud = synth_shape("barbell", 100, make_rng(0))
    assert len(cloud) == 300
    assert np.bincount(cloud.labels).tolist() == [100, 100, 100]


def test_synth_labels_and_determinism():
    for kind in ("barbell", "table", "plane-toy"):
        a = synth_shape(kind, 40, make_rng(8))
        b = synth_shape(kind, 40, make_rng(8))
        assert a.points.tobytes() == b.points.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
    assert set(synth_shape("table", 40, make_rng(1)).labels) == {0, 1}
    with pytest.raises(ValueError):
        synth_shape("teapot", 10, make_rng(0))


def pieces(pts, lab, category):
    out = []
    for c in np.unique(lab):
        sel = pts[lab == c]
        if category == "plane-toy" and c == 1:
            out += [sel[sel[:, 1] < 0], sel[sel[:, 1] > 0]]  # one slab per side
        else:
            out.append(sel)
    return out


def test_parts_disjoint_in_normalized_frame():
    for pair in synth_dataset(("barbell", "table", "plane-toy"), count=9, points_per_part=64):
        pts, lab = pair.complete.points, pair.complete.labels
        parts = pieces(pts, lab, pair.category)
        boxes = [(p.min(0), p.max(0)) for p in parts]
        assert len(parts) == {"barbell": 3, "table": 2, "plane-toy": 4}[pair.category]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                gap = np.maximum(boxes[j][0] - boxes[i][1], boxes[i][0] - boxes[j][1])
                assert gap.max() >= 0.05


@pytest.mark.parametrize("mode", ["halfspace", "sphere"])
def test_degrade_fraction(mode, rng):
    cube = LabeledPointCloud(rng.uniform(-1, 1, (2000, 3)), np.zeros(2000))
    out = degrade(cube, mode, 0.25, make_rng(3))
    removed = 1 - len(out) / len(cube)
    assert 0.20 <= removed <= 0.30
    assert as_set(out.points) <= as_set(cube.points)
    again = degrade(cube, mode, 0.25, make_rng(3))
    np.testing.assert_array_equal(out.points, again.points)


def test_degrade_limits(rng):
    cube = LabeledPointCloud(rng.uniform(-1, 1, (50, 3)), np.zeros(50))
    np.testing.assert_array_equal(degrade(cube, "halfspace", 1e-6, rng).points, cube.points)
    with pytest.raises(DegenerateInput):
        degrade(LabeledPointCloud(np.zeros((1, 3)), [0]), "sphere", 0.6, rng)
    with pytest.raises(ValueError):
        degrade(cube, "halfspace", 1.0, rng)


def test_pairs_share_transform():
    for pair in synth_dataset(count=4, points_per_part=50, seed=2):
        assert np.max(np.abs(pair.complete.points)) <= 1 - 1e-6
        assert as_set(pair.partial.points) <= as_set(pair.complete.points)


def test_synth_dataset_reproducible_and_offset():
    a = synth_dataset(count=6, points_per_part=20, seed=5)
    b = synth_dataset(count=3, points_per_part=20, seed=5, offset=3)
    assert [p.shape_id for p in a[3:]] == [p.shape_id for p in b]
    np.testing.assert_array_equal(a[4].partial.points, b[1].partial.points)


def write_dataset(root, with_corrupt=True):
    pairs = synth_dataset(("barbell", "table"), count=3, points_per_part=30, seed=1)
    for pair in pairs:
        write_cloud(pair.complete, root / pair.category / f"{pair.shape_id}.xyz")
    if with_corrupt:
        (root / "table" / "broken.xyz").write_text("1 2\n")
    return pairs


def test_loader_skips_corrupt_and_warns(tmp_path, caplog):
    write_dataset(tmp_path)
    loader = load_shapenet_part(tmp_path, 3)
    with caplog.at_level(logging.WARNING):
        pairs = list(loader)
    assert len(pairs) == 3
    assert loader.skipped == 1
    assert sum("broken" in r.getMessage() for r in caplog.records) == 1


def test_loader_deterministic_and_ordered(tmp_path):
    write_dataset(tmp_path, with_corrupt=False)
    a = list(load_shapenet_part(tmp_path, 3, seed=4))
    b = list(load_shapenet_part(tmp_path, 3, seed=4))
    assert [p.shape_id for p in a] == sorted(p.shape_id for p in a)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.partial.points, y.partial.points)
        assert np.max(np.abs(x.complete.points)) <= 1 - 1e-6
        assert as_set(x.partial.points) <= as_set(x.complete.points)


def test_loader_manifest_and_partials(tmp_path):
    pairs = write_dataset(tmp_path, with_corrupt=False)
    ids = [p.shape_id for p in pairs][::-1]
    (tmp_path / "manifest.txt").write_text("\n".join(ids) + "\n")
    shipped = pairs[0]
    write_cloud(shipped.partial, tmp_path / shipped.category / f"{shipped.shape_id}.partial.xyz")
    loaded = list(load_shapenet_part(tmp_path, 3))
    assert [p.shape_id for p in loaded] == ids
    mine = next(p for p in loaded if p.shape_id == shipped.shape_id)
    assert len(mine.partial) == len(shipped.partial)


def test_loader_label_overflow_is_fatal(tmp_path):
    write_dataset(tmp_path, with_corrupt=False)
    with pytest.raises(LabelRange):
        list(load_shapenet_part(tmp_path, 2))
