"""Flat, JSON-serializable run configuration shared by every CLI subcommand."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .embedder import EmbedderConfig
from .errors import ConfigError
from .losses import LossConfig
from .pooling import PoolingMethod
from .sampler import SamplerConfig
from .synthetic import SyntheticSpec
from .trainer import TrainConfig

SEED_ENV = "DGTL_SEED"
SEED_KEYS = ("data_seed", "sampler_seed", "model_seed")


@dataclass
class RunConfig:
    # data
    dataset_path: str | None = None
    num_identities: int = 32
    samples_per_identity_per_modality: int = 8
    input_shape: tuple = (6, 6, 4)
    identity_scale: float = 1.0
    modality_offset_scale: float = 1.0
    noise_scale: float = 0.2
    data_seed: int = 0
    test_per_modality: int = 3
    # sampler
    P: int = 8
    K: int = 4
    sampler_seed: int = 0
    # embedder
    spec_layers: tuple = (32,)
    shared_layers: tuple = (32,)
    feature_dim: int = 32
    fusion: str = "sum"
    pool_fine: str = "max"
    pool_coarse: str = "max"
    gem_p: float = 3.0
    bn_epsilon: float = 1e-5
    model_seed: int = 0
    # loss
    margin_fine: float = 0.3
    margin_coarse: float = 0.3
    arrangement: str = "f2c"
    fine_feature: str = "f_p"
    coarse_feature: str = "f_bnf"
    # optimizer
    epochs: int = 30
    learning_rate: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    log_every: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.spec_layers = tuple(int(v) for v in self.spec_layers)
        self.shared_layers = tuple(int(v) for v in self.shared_layers)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("input_shape", "spec_layers", "shared_layers"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object of key/value pairs")
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def replace(self, **changes) -> "RunConfig":
        unknown = set(changes) - set(self.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def with_env_seed(self, environ=None) -> "RunConfig":
        """Apply the ``DGTL_SEED`` override to every seed, if set."""
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
        return self.replace(**{k: seed for k in SEED_KEYS})

    # -- typed views -----------------------------------------------------

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.num_identities, self.samples_per_identity_per_modality, self.input_shape,
                             self.identity_scale, self.modality_offset_scale, self.noise_scale, self.data_seed)

    def embedder_config(self, num_classes: int) -> EmbedderConfig:
        return EmbedderConfig(
            input_shape=self.input_shape, spec_layers=self.spec_layers, shared_layers=self.shared_layers,
            feature_dim=self.feature_dim, num_identities=num_classes, fusion=self.fusion,
            pool_fine=PoolingMethod(self.pool_fine, self.gem_p), pool_coarse=PoolingMethod(self.pool_coarse, self.gem_p),
            bn_epsilon=self.bn_epsilon, seed=self.model_seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.margin_fine, self.margin_coarse, self.arrangement, self.fine_feature,
                          self.coarse_feature)

    def train_config(self, num_classes: int, checkpoint_path=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay, sampler=SamplerConfig(self.P, self.K, self.sampler_seed),
            embedder=self.embedder_config(num_classes), loss=self.loss_config(), log_every=self.log_every,
            checkpoint_path=None if checkpoint_path is None else str(checkpoint_path),
        )


def default_config_path():
    return resources.files("dgtl") / "configs" / "benchmark.json"


def default_config() -> RunConfig:
    return RunConfig.from_dict(json.loads(default_config_path().read_text()))
