"""3D CNN encoder with completion and segmentation decoders plus the MLP head.

Pipeline for each input cloud::

    gridding -> 4 x [conv3d, batch_norm, max_pool3d, leaky_relu] -> FC -> FC
      -> completion decoder (4 transposed convs) -> W'   (1 channel, N^3)
      -> segmentation decoder (4 transposed convs) -> BI (C channels, N^3)
    sparse = resample(gridding_reverse(W') ++ partial input, K)
    dense  = sparse repeated r times + MLP(cubic features of sparse)

The last layer of each decoder has a bias and no batch norm: ReLU for the
completion grid (weights must stay non-negative for the centroid), none
for the segmentation logits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, from_pairs, to_pairs
from .core import PointCloud
from .errors import EmptyCloud
from .gridding import cell_values, gridding, gridding_reverse, sample_corner_features
from .io import read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

BUFFER_SUFFIXES = (".running_mean", ".running_var")


@dataclass
class ModelParams:
    tensors: dict
    buffers: dict = field(default_factory=dict)
    version: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True)
                            for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()}, self.version)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype), requires_grad=True)
                            for k, v in self.tensors.items()},
                           {k: v.astype(dtype) for k, v in self.buffers.items()},
                           self.version)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def arrays(self) -> dict:
        out = {k: v.data for k, v in self.tensors.items()}
        out.update(self.buffers)
        return out

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_bound(fan_in: float) -> float:
    return float(np.sqrt(6.0 / fan_in))


def _uniform(rng, shape, fan_in):
    b = init_bound(fan_in)
    return rng.uniform(-b, b, size=shape)


def init_params(config: ModelConfig, rng, dtype=np.float64) -> ModelParams:
    """Uniform ``+-sqrt(6/fan_in)`` weights, zero biases, unit BN scale."""
    t, buf = {}, {}
    k = config.conv_kernel
    cin = 1
    for i, cout in enumerate(config.enc_channels):
        t[f"enc{i}.weight"] = _uniform(rng, (cout, cin, k, k, k), cin * k ** 3)
        _add_bn(t, buf, f"enc{i}.bn", cout)
        cin = cout
    flat = config.enc_channels[-1] * config.bottleneck ** 3
    d1, d2 = config.fc_dims
    t["fc0.weight"] = _uniform(rng, (flat, d1), flat)
    t["fc0.bias"] = np.zeros(d1)
    t["fc1.weight"] = _uniform(rng, (d1, d2), d1)
    t["fc1.bias"] = np.zeros(d2)
    kd, s = config.deconv_kernel, config.deconv_stride
    for prefix, chans in (("dec", config.dec_channels), ("seg", config.seg_channels)):
        cin = config.decoder_in_channels
        for i, cout in enumerate(chans):
            t[f"{prefix}{i}.weight"] = _uniform(rng, (cin, cout, kd, kd, kd),
                                                cin * (kd / s) ** 3)
            if i < 3:
                _add_bn(t, buf, f"{prefix}{i}.bn", cout)
            else:
                t[f"{prefix}{i}.bias"] = np.zeros(cout)
            cin = cout
    widths = (config.mlp_input,) + tuple(config.mlp_hidden) + (config.mlp_output,)
    for j in range(len(widths) - 1):
        t[f"mlp{j}.weight"] = _uniform(rng, (widths[j], widths[j + 1]), widths[j])
        t[f"mlp{j}.bias"] = np.zeros(widths[j + 1])
    tensors = {name: Tensor(np.asarray(v, dtype=dtype), requires_grad=True)
               for name, v in t.items()}
    buffers = {name: np.asarray(v, dtype=dtype) for name, v in buf.items()}
    return ModelParams(tensors, buffers)


def _add_bn(t, buf, prefix, c):
    t[f"{prefix}.gamma"] = np.ones(c)
    t[f"{prefix}.beta"] = np.zeros(c)
    buf[f"{prefix}.running_mean"] = np.zeros(c)
    buf[f"{prefix}.running_var"] = np.ones(c)


def resample_indices(n: int, k: int, rng) -> np.ndarray:
    if k < 1:
        raise ValueError("K must be at least 1")
    if n >= k:
        return rng.choice(n, size=k, replace=False)
    return np.concatenate([np.arange(n), rng.integers(0, n, size=k - n)])


def resample(cloud, k: int, rng) -> PointCloud:
    """Exactly ``k`` points: a random subset, or every point once plus random repeats."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud).reshape(-1, 3)
    if len(pts) == 0:
        log.warning("resampling an empty cloud: returning %d copies of the origin", k)
        return PointCloud(np.zeros((k, 3)))
    return PointCloud(pts[resample_indices(len(pts), k, rng)])


@dataclass
class ForwardOutput:
    grid: Tensor           # (B, N, N, N) completed grid W'
    seg: Tensor            # (B, C, N, N, N) segmentation grids BI
    sparse: list           # per sample Tensor (K, 3)
    sparse_logits: list    # per sample Tensor (K, C)
    dense: list            # per sample Tensor (K * r, 3)
    dense_logits: list     # per sample Tensor (K * r, C)
    activations: dict = field(default_factory=dict)


def _norm(x, params, prefix, mode):
    b = params.buffers
    return ad.batch_norm(x, params.tensors[f"{prefix}.gamma"], params.tensors[f"{prefix}.beta"],
                         mode=mode, running_mean=b.get(f"{prefix}.running_mean"),
                         running_var=b.get(f"{prefix}.running_var"))


def _linear(x, params, prefix):
    return ad.bias_add(ad.matmul(x, params.tensors[f"{prefix}.weight"]),
                       params.tensors[f"{prefix}.bias"])


def encode(params: ModelParams, config: ModelConfig, grids: Tensor, norm: str):
    x = ad.reshape(grids, (grids.shape[0], 1) + grids.shape[1:])
    for i in range(4):
        x = ad.conv3d(x, params.tensors[f"enc{i}.weight"], 1, config.conv_padding)
        x = _norm(x, params, f"enc{i}.bn", norm)
        x = ad.max_pool3d(x, config.pool)
        x = ad.leaky_relu(x)
    h = ad.reshape(x, (x.shape[0], -1))
    h = ad.leaky_relu(_linear(h, params, "fc0"))
    h = ad.leaky_relu(_linear(h, params, "fc1"))
    s = config.bottleneck
    return ad.reshape(h, (h.shape[0], config.decoder_in_channels, s, s, s))


def decode(params: ModelParams, config: ModelConfig, z: Tensor, prefix: str, norm: str):
    """Return the final output and the three intermediate activations."""
    acts = []
    y = z
    for i in range(4):
        y = ad.conv3d_transposed(y, params.tensors[f"{prefix}{i}.weight"],
                                 config.deconv_stride, config.deconv_padding)
        if i < 3:
            y = ad.leaky_relu(_norm(y, params, f"{prefix}{i}.bn", norm))
            acts.append(y)
        else:
            y = ad.bias_add(y, params.tensors[f"{prefix}{i}.bias"], axis=1)
    return y, acts


def _as_points(cloud, dtype):
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    if isinstance(pts, Tensor):
        return pts
    return Tensor(np.asarray(pts, dtype=dtype).reshape(-1, 3))


def forward(params: ModelParams, config: ModelConfig, partial, rng, norm: str = "train",
            keep_activations: bool = False) -> ForwardOutput:
    """Run the network on one cloud or a list of clouds (a batch).

    ``norm`` selects the batch-norm mode (``train``, ``eval`` or ``frozen``);
    ``rng`` drives the sparse-cloud resampling.
    """
    clouds = partial if isinstance(partial, (list, tuple)) else [partial]
    dtype = params.dtype
    inputs = [_as_points(c, dtype) for c in clouds]
    n = config.resolution
    grids = ad.stack([gridding(p, n) for p in inputs])
    z = encode(params, config, grids, norm)
    comp, comp_acts = decode(params, config, z, "dec", norm)
    seg, seg_acts = decode(params, config, z, "seg", norm)
    comp = ad.relu(comp)
    grid = ad.reshape(comp, (comp.shape[0], n, n, n))
    sampled = comp_acts[:config.sampled_layers]
    if config.cross_feed:
        sampled = sampled + seg_acts[:config.sampled_layers]

    out = ForwardOutput(grid, seg, [], [], [], [])
    r = config.r_dense
    for b, pts_in in enumerate(inputs):
        rev = gridding_reverse(grid[b], config.reverse_threshold)
        pool = ad.concat([rev, pts_in], axis=0)
        if len(pool) == 0:
            raise EmptyCloud("gridding reverse emitted no points and the input is empty")
        sparse = pool[resample_indices(len(pool), config.k_sparse, rng)]
        feats = ad.concat([sparse] + [sample_corner_features(sparse.data, act[b])
                                      for act in sampled], axis=1)
        h = feats
        n_layers = len(config.mlp_hidden) + 1
        for j in range(n_layers):
            h = _linear(h, params, f"mlp{j}")
            if j < n_layers - 1:
                h = ad.leaky_relu(h)
        offsets = ad.reshape(h, (config.k_sparse * r, 3))
        dense = sparse[np.repeat(np.arange(config.k_sparse), r)] + offsets
        seg_b = seg[b]
        out.sparse.append(sparse)
        out.dense.append(dense)
        out.sparse_logits.append(cell_values(sparse.data, seg_b))
        out.dense_logits.append(cell_values(dense.data, seg_b))
    if keep_activations:
        out.activations = {"grids": grids, "bottleneck": z, "completion": comp_acts,
                           "segmentation": seg_acts}
    return out


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: dict | None = None):
    manifest = {f"model.{k}": v for k, v in to_pairs(config).items()}
    manifest["params.version"] = str(params.version)
    if extra:
        manifest.update(extra)
    write_checkpoint(path, params.arrays(), manifest)


def load_checkpoint(path, dtype=np.float64):
    arrays, manifest = read_checkpoint(path)
    model_pairs = {k[len("model."):]: v for k, v in manifest.items() if k.startswith("model.")}
    config = from_pairs(ModelConfig, model_pairs)
    tensors = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in arrays.items()
               if not k.endswith(BUFFER_SUFFIXES)}
    buffers = {k: v.astype(dtype) for k, v in arrays.items() if k.endswith(BUFFER_SUFFIXES)}
    version = int(manifest.get("params.version", 0))
    return ModelParams(tensors, buffers, version), config, manifest
