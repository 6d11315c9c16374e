"""Model and run configuration with ``key=value`` (de)serialization."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields

from .autodiff import conv_output_extent, transposed_output_extent
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 16
    n_categories: int = 3
    enc_channels: tuple = (8, 16, 32, 64)
    fc_dims: tuple = (256, 128)
    dec_channels: tuple = (32, 16, 8, 1)
    k_sparse: int = 256
    r_dense: int = 4
    mlp_hidden: tuple = (128, 64)
    conv_kernel: int = 4
    conv_padding: int = 2
    pool: int = 2
    deconv_kernel: int = 4
    deconv_stride: int = 2
    deconv_padding: int = 1
    sampled_layers: int = 3
    cross_feed: bool = False
    reverse_threshold: float = 1e-6

    def __post_init__(self):
        for name in ("resolution", "n_categories", "k_sparse", "r_dense", "conv_kernel",
                     "pool", "deconv_kernel", "deconv_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.resolution < 2:
            raise ConfigError("resolution must be at least 2")
        if len(self.enc_channels) != 4 or len(self.dec_channels) != 4:
            raise ConfigError("enc_channels and dec_channels need four entries each")
        if self.dec_channels[-1] != 1:
            raise ConfigError("the completion decoder must end with one channel")
        if len(self.fc_dims) != 2:
            raise ConfigError("fc_dims needs two entries")
        if any(c < 1 for c in self.enc_channels + self.dec_channels + self.fc_dims
               + tuple(self.mlp_hidden)):
            raise ConfigError("layer widths must be positive")
        if not 1 <= self.sampled_layers <= 3:
            raise ConfigError("sampled_layers must be 1, 2 or 3")
        self.encoder_extents()
        self.decoder_extents()

    def encoder_extents(self) -> list[int]:
        """Spatial extent after each encoder block (conv, then pool)."""
        sizes, n = [], self.resolution
        for _ in range(4):
            n = conv_output_extent(n, self.conv_kernel, 1, self.conv_padding) // self.pool
            if n < 1:
                raise ConfigError(f"encoder collapses resolution {self.resolution} to zero")
            sizes.append(n)
        return sizes

    @property
    def bottleneck(self) -> int:
        return self.encoder_extents()[-1]

    @property
    def decoder_in_channels(self) -> int:
        cells = self.bottleneck ** 3
        if self.fc_dims[1] % cells:
            raise ConfigError(f"fc_dims[1]={self.fc_dims[1]} is not a multiple of "
                              f"{cells} bottleneck cells")
        return self.fc_dims[1] // cells

    def decoder_extents(self) -> list[int]:
        sizes, n = [], self.bottleneck
        for _ in range(4):
            n = transposed_output_extent(n, self.deconv_kernel, self.deconv_stride,
                                         self.deconv_padding)
            sizes.append(n)
        if sizes[-1] != self.resolution:
            raise ConfigError(f"decoder produces extent {sizes[-1]}, expected "
                              f"{self.resolution}")
        self.decoder_in_channels
        return sizes

    @property
    def seg_channels(self) -> tuple:
        return tuple(self.dec_channels[:-1]) + (self.n_categories,)

    @property
    def mlp_input(self) -> int:
        width = sum(self.dec_channels[:self.sampled_layers])
        if self.cross_feed:
            width += sum(self.seg_channels[:self.sampled_layers])
        return 3 + 8 * width

    @property
    def mlp_output(self) -> int:
        return 3 * self.r_dense

    @classmethod
    def full_scale(cls, n_categories: int = 4) -> "ModelConfig":
        """Full-size preset: 64^3 grids, FC widths 1024/2048, MLP widths 1000/2000.

        The published MLP sizes (12, 1000, 2000, 3584) cannot be matched at
        both ends by this pipeline, so only the hidden widths are kept.
        """
        return cls(resolution=64, n_categories=n_categories,
                   enc_channels=(32, 64, 128, 256), fc_dims=(1024, 2048),
                   dec_channels=(128, 64, 32, 1), k_sparse=2048, r_dense=8,
                   mlp_hidden=(1000, 2000))


DEFAULT_KINDS = ("barbell", "table")


@dataclass(frozen=True)
class RunConfig:
    # model
    resolution: int = 16
    n_categories: int = 3
    enc_channels: tuple = (8, 16, 32, 64)
    fc_dims: tuple = (256, 128)
    dec_channels: tuple = (32, 16, 8, 1)
    k_sparse: int = 256
    r_dense: int = 4
    mlp_hidden: tuple = (128, 64)
    cross_feed: bool = False
    # optimization
    epochs: int = 50
    steps: int = 0
    batch_size: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 7
    precision: str = "f64"
    frozen_norm: bool = False
    # loss
    w_chamfer: float = 1.0
    w_cross_entropy: float = 1.0
    w_gridding: float = 1.0
    dense_ce: bool = True
    # data
    dataset: str = ""
    synth_kinds: tuple = DEFAULT_KINDS
    synth_count: int = 64
    synth_holdout: int = 16
    points_per_part: int = 128
    degrade_mode: str = "halfspace"
    degrade_fraction: float = 0.25
    # io
    checkpoint: str = "model.grjp"
    log_interval: int = 10
    log_path: str = ""

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.epochs < 0 or self.steps < 0:
            raise ConfigError("epochs and steps must be non-negative")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be positive")

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in dataclasses.asdict(self).items()
                              if k in names})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_value(kind, text: str, name: str = "value"):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            items = [t.strip() for t in text.split(",") if t.strip()]
            out = []
            for item in items:
                try:
                    out.append(int(item))
                except ValueError:
                    out.append(item)
            return tuple(out)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {name}") from None


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_pairs(cfg) -> dict:
    return {f.name: format_value(getattr(cfg, f.name)) for f in fields(cfg)}


def from_pairs(cls, pairs: dict, base=None):
    """Build ``cls`` from string pairs; unknown keys are a :class:`ConfigError`."""
    types = _field_types(cls)
    unknown = sorted(set(pairs) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: parse_value(types[k], v, k) for k, v in pairs.items()}
    try:
        if base is not None:
            return dataclasses.replace(base, **values)
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def read_config_file(path) -> dict:
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            pairs[key.strip().replace("-", "_")] = value.strip()
    return pairs


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    pairs = read_config_file(path) if path else {}
    cfg = from_pairs(RunConfig, pairs)
    if overrides:
        types = _field_types(RunConfig)
        unknown = sorted(set(overrides) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def diff_model_configs(a: ModelConfig, b: ModelConfig) -> list[str]:
    return [f.name for f in fields(ModelConfig) if getattr(a, f.name) != getattr(b, f.name)]
