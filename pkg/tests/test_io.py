import struct

import numpy as np
import pytest

from grjointnet.core import FeatureGrid, LabeledPointCloud, PointCloud, ScalarGrid
from grjointnet.errors import LabelRange, ParseError
from grjointnet.io import (read_checkpoint, read_cloud, read_grid, write_checkpoint,
                           write_cloud, write_grid)


def test_labeled_line(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("0.1 0.2 0.3 2\n")
    cloud = read_cloud(path)
    assert isinstance(cloud, LabeledPointCloud)
    np.testing.assert_array_equal(cloud.points, [[0.1, 0.2, 0.3]])
    assert cloud.labels.tolist() == [2]


def test_unlabeled_with_comments_and_scientific(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("# header\n1e-3 -2.5E+0 3\n\n  4 5 6  \n")
    cloud = read_cloud(path)
    assert type(cloud) is PointCloud
    np.testing.assert_array_equal(cloud.points, [[1e-3, -2.5, 3], [4, 5, 6]])


@pytest.mark.parametrize("body, line", [("0.1 0.2\n", 1), ("1 2 3\n1 2 x\n", 2),
                                        ("1 2 3 0\n1 2 3\n", 2), ("1 2 3 4 5\n", 1),
                                        ("1 2 3 a\n", 1), ("1 2 nan\n", 1)])
def test_parse_errors_carry_line(tmp_path, body, line):
    path = tmp_path / "c.xyz"
    path.write_text(body)
    with pytest.raises(ParseError) as info:
        read_cloud(path)
    assert info.value.line == line
    assert f":{line}:" in str(info.value)


def test_label_range_at_load(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("0 0 0 3\n")
    with pytest.raises(LabelRange):
        read_cloud(path, n_categories=3)


def test_cloud_roundtrip(tmp_path, rng):
    cloud = LabeledPointCloud(rng.normal(size=(200, 3)) * 10 ** rng.uniform(-5, 5, (200, 1)),
                              rng.integers(0, 4, 200))
    path = tmp_path / "c.xyz"
    write_cloud(cloud, path)
    back = read_cloud(path)
    np.testing.assert_allclose(back.points, cloud.points, rtol=1e-9, atol=0)
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_array_equal(back.labels, cloud.labels)


def test_grid_layout(tmp_path):
    values = np.arange(27, dtype=float).reshape(3, 3, 3)
    path = tmp_path / "g.bin"
    write_grid(ScalarGrid(values), path)
    raw = path.read_bytes()
    assert raw[:4] == b"GRJG"
    assert struct.unpack("<HHII", raw[4:16]) == (1, 0, 3, 1)
    body = np.frombuffer(raw[16:], dtype="<f4")
    np.testing.assert_array_equal(body, np.arange(27))
    back = read_grid(path)
    assert isinstance(back, ScalarGrid)
    np.testing.assert_array_equal(back.weights, values)


def test_feature_grid_roundtrip(tmp_path, rng):
    values = rng.normal(size=(5, 4, 4, 4)).astype(np.float32).astype(float)
    path = tmp_path / "g.bin"
    write_grid(FeatureGrid(values), path)
    back = read_grid(path)
    assert back.channels == 5
    np.testing.assert_array_equal(back.values, values)


def test_grid_rejects_bad_files(tmp_path):
    path = tmp_path / "g.bin"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ParseError):
        read_grid(path)
    path.write_bytes(b"GRJG" + struct.pack("<HHII", 1, 0, 2, 1) + bytes(8))
    with pytest.raises(ParseError):
        read_grid(path)


def test_checkpoint_layout_and_roundtrip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(2, 3)), "bias": np.zeros(4), "é": np.ones((1, 1, 2))}
    path = tmp_path / "m.grjp"
    write_checkpoint(path, tensors, {"model.resolution": "16"})
    raw = path.read_bytes()
    assert raw[:4] == b"GRJP"
    assert struct.unpack("<HI", raw[4:10]) == (1, 3)
    assert struct.unpack("<H", raw[10:12]) == (1,)
    assert raw[12:13] == b"a"
    assert struct.unpack("<BII", raw[13:22]) == (2, 2, 3)
    arrays, manifest = read_checkpoint(path)
    assert list(arrays) == ["a", "bias", "é"]
    np.testing.assert_array_equal(arrays["a"], tensors["a"].astype(np.float32))
    assert manifest == {"model.resolution": "16"}


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "m.grjp"
    write_checkpoint(path, {"w": np.ones((10, 10))})
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(ParseError):
        read_checkpoint(path)
