import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from grjointnet.autodiff import Tensor
from grjointnet.core import LabeledPointCloud
from grjointnet.errors import EmptyCloud, LabelRange, ShapeError
from grjointnet.gradcheck import run_suite
from grjointnet.gridding import gridding
from grjointnet.losses import (SpatialHash, chamfer, chamfer_terms, combined_loss,
                               cross_entropy, gridding_loss, nearest_brute,
                               nearest_neighbors, transfer_labels)


def oracle_chamfer(g, m):
    """Direct O(nm) evaluation of both one-sided means."""
    d = ((g[:, None, :] - m[None, :, :]) ** 2).sum(-1)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


@pytest.mark.parametrize("shift", [0.0, 3.0])
def test_hash_matches_brute_indices(rng, shift):
    for _ in range(10):
        refs = rng.uniform(-1, 1, (int(rng.integers(1, 400)), 3))
        queries = rng.uniform(-1, 1, (int(rng.integers(1, 300)), 3)) + shift
        i_h, d_h = SpatialHash(refs).query(queries)
        i_b, d_b = nearest_brute(queries, refs)
        np.testing.assert_array_equal(i_h, i_b)
        np.testing.assert_array_equal(d_h, d_b)


def test_hash_on_flat_and_clustered_clouds(rng):
    flat = rng.uniform(-1, 1, (300, 3))
    flat[:, 2] = 0.25
    cluster = np.concatenate([rng.normal(0, 1e-3, (200, 3)), [[0.9, 0.9, 0.9]]])
    for refs in (flat, cluster, np.zeros((5, 3))):
        q = rng.uniform(-1.5, 1.5, (100, 3))
        np.testing.assert_array_equal(SpatialHash(refs).query(q)[0], nearest_brute(q, refs)[0])


def test_ties_go_to_lowest_index():
    refs = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    q = np.zeros((1, 3))
    for method in ("brute", "hash"):
        assert nearest_neighbors(q, refs, method)[0][0] == 0


def test_chamfer_matches_oracle(rng):
    for _ in range(100):
        g = rng.uniform(-1, 1, (int(rng.integers(1, 513)), 3))
        m = rng.uniform(-1, 1, (int(rng.integers(1, 513)), 3))
        ref = oracle_chamfer(g, m)
        assert abs(sum(chamfer_terms(g, m, "hash")) - ref) < 1e-10
        assert abs(float(chamfer(g, m).data) - ref) < 1e-10


def test_chamfer_symmetry_translation(rng):
    g, m = rng.uniform(-1, 1, (100, 3)), rng.uniform(-1, 1, (80, 3))
    assert float(chamfer(g, m).data) == float(chamfer(m, g).data)
    t = rng.normal(size=3)
    assert abs(float(chamfer(g + t, m + t).data) - float(chamfer(g, m).data)) < 1e-12


def test_chamfer_zero_iff_same_set(rng):
    g = rng.uniform(-1, 1, (50, 3))
    assert float(chamfer(g, g[::-1]).data) == 0.0
    assert float(chamfer(g, np.concatenate([g, g[:3]])).data) == 0.0
    assert float(chamfer(g, g[:-1]).data) > 0.0


def test_chamfer_empty():
    with pytest.raises(EmptyCloud):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


finite = st.floats(-1, 1, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=finite),
       arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=finite))
def test_chamfer_properties(g, m):
    a, b = chamfer_terms(g, m, "hash")
    c, d = chamfer_terms(m, g, "brute")
    assert a == d and b == c
    assert a >= 0 and b >= 0


def test_gradient_suites_for_losses():
    for name in ("chamfer", "cross_entropy", "gridding_loss"):
        assert run_suite(name, seed=11).passed, name


def test_cross_entropy_uniform_is_log_c():
    for c in (2, 3, 7, 50):
        assert float(cross_entropy(np.zeros((1, c)), [c - 1]).data) == math.log(c)
        value = float(cross_entropy(np.zeros((37, c)), np.arange(37) % c).data)
        assert value == math.log(c)


def test_cross_entropy_stable_and_nonnegative(rng):
    z = rng.normal(size=(20, 4)) * 1e3
    t = rng.integers(0, 4, 20)
    value = float(cross_entropy(z, t).data)
    assert np.isfinite(value) and value >= 0
    with pytest.raises(LabelRange):
        cross_entropy(z, np.full(20, 4))
    with pytest.raises(ShapeError):
        cross_entropy(z, t[:5])


def test_gridding_loss_norm_properties(rng):
    a, b, c = rng.normal(size=(3, 4, 4, 4))
    l1 = lambda x, y: float(gridding_loss(x, y).data)  # noqa: E731
    assert l1(a, c) <= l1(a, b) + l1(b, c) + 1e-15
    assert l1(3 * a, 3 * b) == pytest.approx(3 * l1(a, b), rel=1e-14)
    with pytest.raises(ShapeError):
        gridding_loss(np.zeros((4, 4, 4)), np.zeros((5, 5, 5)))


def test_transfer_labels(rng):
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    out = transfer_labels(np.array([[0.1, 0, 0], [0.9, 0.1, 0]]), gt, np.array([4, 7]))
    assert out.tolist() == [4, 7]


def test_combined_loss_zero_case(rng):
    pts = rng.uniform(-0.9, 0.9, (64, 3))
    labels = rng.integers(0, 3, 64)
    gt = LabeledPointCloud(pts, labels)
    grid = gridding(pts, 8).data
    logits = np.full((64, 3), -40.0)
    logits[np.arange(64), labels] = 40.0
    total, report = combined_loss(Tensor(pts), Tensor(pts), Tensor(grid), Tensor(logits),
                                  Tensor(logits), gt, grid)
    assert float(total.data) < 1e-6
    assert set(report) == {"cd_sparse", "cd_dense", "ce_sparse", "ce_dense", "grid"}


def test_combined_loss_report_sums_to_total(rng):
    pts = rng.uniform(-0.9, 0.9, (32, 3))
    gt = LabeledPointCloud(pts, rng.integers(0, 2, 32))
    sparse = rng.uniform(-0.9, 0.9, (16, 3))
    dense = rng.uniform(-0.9, 0.9, (48, 3))
    total, report = combined_loss(sparse, dense, gridding(sparse, 6), rng.normal(size=(16, 2)),
                                  rng.normal(size=(48, 2)), gt, gridding(pts, 6).data,
                                  dense_ce=False)
    assert "ce_dense" not in report
    assert float(total.data) == pytest.approx(sum(report.values()), rel=1e-14)
