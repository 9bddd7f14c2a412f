"""Flat ``key = value`` run configuration, resolved snapshot and content hash."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import tomli

from .audio import StftParams
from .joint import LossWeights, ModelConfig
from .models import PartitionSpec
from .synth import SweepGrid


class ConfigError(ValueError):
    pass


GL_METHODS = ("pinv", "nnls", "kernel")


@dataclass
class FeatureConfig:
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 64
    norm_floor_db: float = -80.0
    trim: float = 0.05  # seconds dropped from the start of every clip
    height: int = 32
    width: int = 32

    @property
    def stft(self):
        return StftParams(self.n_fft, self.hop)


@dataclass
class TrainConfig:
    batch_size: int = 10
    epochs: int = 40
    lr: float = 1e-4
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if len(self.split) != 3 or any(f < 0 for f in self.split):
            raise ConfigError(f"split must be three non-negative fractions, got {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(self.split)}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm)")
        if self.epochs < 1 or self.checkpoint_every < 1:
            raise ConfigError("epochs and checkpoint_every must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


@dataclass
class RunConfig:
    # data sweep
    n_pos: int = 50
    n_diam: int = 40
    f0_list: tuple = (140.0,)
    diam_min: float = 0.05
    diam_max: float = 1.0
    image_height: int = 32
    image_width: int = 32
    image_channels: int = 1
    duration: float = 0.5
    # features
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 64
    norm_floor_db: float = -80.0
    trim: float = 0.05
    # model
    height: int = 32
    width: int = 32
    d_shared: int = 32
    d_g_only: int = 32
    d_s_only: int = 32
    channels: tuple = (16, 32, 64, 64)
    attention_stage: int = 3
    attention_reduction: int = 1
    bridge_steps: int = 8
    prior_steps: int = 4
    flow_hidden: int = 128
    coupling_clamp: float = 5.0
    sigma: float = 0.1
    # training
    batch_size: int = 10
    epochs: int = 40
    lr: float = 1e-4
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    checkpoint_every: int = 1
    w_rec_g: float = 1.0
    w_rec_s: float = 1.0
    w_map: float = 1.0
    w_prior: float = 0.1
    w_entropy: float = 0.0
    w_prior_encoder: float = 0.0
    prior_lr_scale: float = 10.0  # step-size multiplier for the two prior flows
    # evaluation
    gl_iterations: int = 60
    gl_method: str = "pinv"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(f.default, str):
                if v not in GL_METHODS:
                    raise ConfigError(f"{f.name} must be one of {GL_METHODS}, got {v!r}")
            elif isinstance(f.default, tuple):
                if not isinstance(v, (list, tuple)):
                    raise ConfigError(f"{f.name} must be a list")
                setattr(self, f.name, tuple(v))
            elif not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{f.name} must be a number, got {v!r}")
            elif isinstance(f.default, int) and not isinstance(v, int):
                if float(v) != int(v):
                    raise ConfigError(f"{f.name} must be an integer, got {v!r}")
                setattr(self, f.name, int(v))
            elif isinstance(f.default, float):
                setattr(self, f.name, float(v))
        try:
            self.grid(), self.features(), self.model(), self.train(), self.weights()
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e

    def grid(self):
        return SweepGrid(self.n_pos, self.n_diam, list(self.f0_list),
                         (self.diam_min, self.diam_max), self.image_height,
                         self.image_width, self.image_channels, self.duration)

    def features(self):
        StftParams(self.n_fft, self.hop)
        if self.n_mels < 8:
            raise ConfigError("n_mels must be at least 8")
        return FeatureConfig(self.n_fft, self.hop, self.n_mels, self.norm_floor_db, self.trim,
                             self.height, self.width)

    def model(self):
        part = PartitionSpec(self.d_shared, self.d_g_only, self.d_s_only)
        if self.height < 16 or self.width < 16:
            raise ConfigError("model grid must be at least 16x16")
        return ModelConfig(self.height, self.width, self.image_channels, part,
                           tuple(self.channels), self.attention_stage, self.attention_reduction,
                           self.bridge_steps, self.prior_steps, self.flow_hidden,
                           self.coupling_clamp, self.sigma)

    def train(self):
        return TrainConfig(self.batch_size, self.epochs, self.lr, tuple(self.split), self.seed,
                           self.checkpoint_every)

    def weights(self):
        if self.w_prior_encoder > 1:
            raise ConfigError("w_prior_encoder must lie in [0, 1]")
        if self.prior_lr_scale <= 0:
            raise ConfigError("prior_lr_scale must be positive")
        return LossWeights(self.w_rec_g, self.w_rec_s, self.w_map, self.w_prior, self.w_entropy,
                           self.w_prior_encoder)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_toml(self):
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    def fingerprint(self):
        return hashlib.sha256(self.to_toml().encode()).hexdigest()

    def replace(self, **overrides):
        d = self.to_dict()
        d.update(overrides)
        return RunConfig(**d)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


def load_config(path=None, overrides=None) -> RunConfig:
    d = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            d = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        nested = [k for k, v in d.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: config must be flat, found tables {nested}")
    d.update(overrides or {})
    return RunConfig.from_dict(d)


def write_snapshot(cfg: RunConfig, out_dir):
    """Write the resolved config and its hash next to a command's outputs."""
    out_dir = Path(out_dir)
    (out_dir / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    (out_dir / "config.sha256").write_text(cfg.fingerprint() + "\n", encoding="utf-8")
