import numpy as np
import pytest

from grjointnet.config import ModelConfig
from grjointnet.core import PointCloud, make_rng
from grjointnet.errors import ConfigError, EmptyCloud
from grjointnet.gradcheck import NETWORK_TOL, network_gradcheck
from grjointnet.network import (forward, init_bound, init_params, load_checkpoint, resample,
                                resample_indices, save_checkpoint)

SMALL = ModelConfig(k_sparse=64, r_dense=2, fc_dims=(64, 64), mlp_hidden=(32,))


@pytest.fixture(scope="module")
def params():
    return init_params(SMALL, make_rng(0))


def partial_cloud(seed=0, count=120):
    return make_rng(seed).uniform(-0.8, 0.8, (count, 3))


def test_output_shapes(params):
    out = forward(params, SMALL, [partial_cloud(0), partial_cloud(1)], make_rng(1))
    n, c = SMALL.resolution, SMALL.n_categories
    assert out.grid.shape == (2, n, n, n)
    assert out.seg.shape == (2, c, n, n, n)
    for b in range(2):
        assert out.sparse[b].shape == (SMALL.k_sparse, 3)
        assert out.dense[b].shape == (SMALL.k_sparse * SMALL.r_dense, 3)
        assert out.sparse_logits[b].shape == (SMALL.k_sparse, c)
        assert out.dense_logits[b].shape == (SMALL.k_sparse * SMALL.r_dense, c)
    assert np.all(out.grid.data >= 0)


def test_extent_bookkeeping():
    cfg = ModelConfig()
    assert cfg.encoder_extents() == [8, 4, 2, 1]
    assert cfg.decoder_extents() == [2, 4, 8, 16]
    assert cfg.decoder_in_channels == 128
    assert cfg.mlp_input == 3 + 8 * (32 + 16 + 8)
    assert ModelConfig(cross_feed=True).mlp_input == 3 + 8 * 2 * (32 + 16 + 8)
    big = ModelConfig.full_scale()
    assert big.resolution == 64 and big.fc_dims == (1024, 2048)
    assert big.decoder_extents()[-1] == 64


@pytest.mark.parametrize("changes", [dict(resolution=12), dict(sampled_layers=4),
                                     dict(k_sparse=0), dict(dec_channels=(8, 8, 8, 2)),
                                     dict(enc_channels=(8, 8))])
def test_inconsistent_config(changes):
    with pytest.raises(ConfigError):
        ModelConfig(**changes)


def test_init_bounds(params):
    k = SMALL.conv_kernel
    w = params.tensors["enc1.weight"].data
    assert np.abs(w).max() <= init_bound(SMALL.enc_channels[0] * k ** 3)
    assert np.abs(w).max() > 0.5 * init_bound(SMALL.enc_channels[0] * k ** 3)
    assert np.all(params.tensors["fc0.bias"].data == 0)
    assert np.all(params.tensors["enc0.bn.gamma"].data == 1)
    assert "dec3.bias" in params.tensors and "dec3.bn.gamma" not in params.tensors
    assert params.tensors["mlp1.weight"].shape == (32, 3 * SMALL.r_dense)


def test_zero_decoder_returns_resampled_input(params):
    p = params.copy()
    for name, t in p.tensors.items():
        if name.startswith("dec"):
            t.data[...] = 0.0
    cloud = partial_cloud(3, 90)
    out = forward(p, SMALL, cloud, make_rng(5), norm="eval")
    assert np.all(out.grid.data == 0)
    idx = resample_indices(len(cloud), SMALL.k_sparse, make_rng(5))
    np.testing.assert_array_equal(out.sparse[0].data, cloud[idx])


def test_empty_input_and_empty_grid(params):
    p = params.copy()
    for name, t in p.tensors.items():
        if name.startswith("dec"):
            t.data[...] = 0.0
    with pytest.raises(EmptyCloud):
        forward(p, SMALL, np.zeros((0, 3)), make_rng(0), norm="eval")


def test_resample_contract(rng):
    pts = rng.normal(size=(10, 3))
    few = resample(PointCloud(pts), 25, rng).points
    assert len(few) == 25
    np.testing.assert_array_equal(few[:10], pts)
    many = resample(pts, 4, rng).points
    assert len({tuple(p) for p in many}) == 4
    assert len(resample(np.zeros((0, 3)), 3, rng).points) == 3


def test_forward_deterministic_given_rng(params):
    a = forward(params.copy(), SMALL, partial_cloud(), make_rng(9), norm="frozen")
    b = forward(params.copy(), SMALL, partial_cloud(), make_rng(9), norm="frozen")
    np.testing.assert_array_equal(a.dense[0].data, b.dense[0].data)


def test_train_norm_updates_buffers_eval_does_not(params):
    p = params.copy()
    before = p.buffers["enc0.bn.running_mean"].copy()
    forward(p, SMALL, partial_cloud(), make_rng(0), norm="eval")
    np.testing.assert_array_equal(p.buffers["enc0.bn.running_mean"], before)
    forward(p, SMALL, [partial_cloud(0), partial_cloud(1)], make_rng(0), norm="train")
    assert not np.array_equal(p.buffers["enc0.bn.running_mean"], before)


def test_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "m.grjp"
    save_checkpoint(path, params, SMALL, {"note": "x"})
    loaded, cfg, manifest = load_checkpoint(path)
    assert cfg == SMALL
    assert manifest["note"] == "x"
    assert set(loaded.tensors) == set(params.tensors)
    assert set(loaded.buffers) == set(params.buffers)
    for k, t in params.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[k].data, t.data.astype(np.float32))


def test_network_end_to_end_gradient():
    result = network_gradcheck(seed=4)
    assert result.max_error < NETWORK_TOL
