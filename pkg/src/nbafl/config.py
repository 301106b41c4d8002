"""Run configuration: a flat ``key = value`` file validated by a pydantic model."""

import logging
import os
import re
from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Extra, Field, ValidationError, root_validator, validator

from . import rng as rngs
from .data_io import LabeledDataset, load_idx, subset, synth_classification
from .learning import LossKind, LossSpec, ProximalConfig
from .orchestrator import FLConfig
from .privacy import ScheduleMode

logger = logging.getLogger("nbafl.config")

DATA_DIR_ENV = "NBAFL_DATA_DIR"
_COMMENT = re.compile(r"(^|\s)#.*$")


class ConfigError(ValueError):
    """The config file could not be parsed or failed validation."""


class DatasetKind(str, Enum):
    MNIST = "mnist"
    SYNTHETIC = "synthetic"


class RunConfigFile(BaseModel):
    n_clients: int = Field(..., ge=1)
    schedule: ScheduleMode = ScheduleMode.ALL_CLIENTS
    k_clients: Optional[int] = Field(None, ge=1)
    rounds: int = Field(25, ge=1)
    epsilon: float = 60.0
    delta: float = 0.01
    clip_c: float = Field(1.0, gt=0)
    mu: float = Field(1.0, gt=0)
    shard_size: int = Field(..., ge=1)
    uplink_exposures: int = Field(1, ge=1)
    dataset: DatasetKind
    mnist_images: str = "train-images-idx3-ubyte"
    mnist_labels: str = "train-labels-idx1-ubyte"
    mnist_test_images: str = "t10k-images-idx3-ubyte"
    mnist_test_labels: str = "t10k-labels-idx1-ubyte"
    synth_n: Optional[int] = Field(None, ge=1)
    synth_d: Optional[int] = Field(None, ge=1)
    synth_classes: Optional[int] = Field(None, ge=2)
    synth_margin: Optional[float] = Field(None, ge=0)
    synth_test_n: int = Field(1000, ge=1)
    test_subset: Optional[int] = Field(None, ge=1)
    data_seed: int = Field(0, ge=0)
    model: LossKind = LossKind.LOGISTIC
    l2_reg: float = Field(1e-3, ge=0)
    inner_steps: int = Field(30, ge=1)
    learning_rate: float = Field(0.002, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    noiseless: bool = False
    out_dir: str = "out"

    class Config:
        extra = Extra.forbid

    @validator("model")
    def model_must_be_classifier(cls, v):
        if v is LossKind.QUADRATIC:
            raise ValueError("model must be logistic or mlp256")
        return v

    @root_validator(skip_on_failure=True)
    def check_modes(cls, values):
        schedule, k = values.get("schedule"), values.get("k_clients")
        if schedule is ScheduleMode.K_RANDOM and k is None:
            raise ValueError("k_clients is required when schedule = krandom")
        if schedule is ScheduleMode.ALL_CLIENTS and k is not None:
            raise ValueError("k_clients only applies to schedule = krandom")
        if values.get("dataset") is DatasetKind.SYNTHETIC:
            missing = [
                key
                for key in ("synth_n", "synth_d", "synth_classes", "synth_margin")
                if values.get(key) is None
            ]
            if missing:
                raise ValueError(f"synthetic dataset requires {', '.join(missing)}")
        return values

    def with_overrides(self, **overrides) -> "RunConfigFile":
        """A validated copy with the given keys replaced; None values are ignored."""
        data = self.dict(exclude_none=True)
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return RunConfigFile(**data)
        except ValidationError as e:
            raise ConfigError(f"Invalid config: {e}") from e

    def loss_spec(self) -> LossSpec:
        return LossSpec(kind=self.model, l2_reg=self.l2_reg)

    def to_fl_config(self) -> FLConfig:
        return FLConfig(
            n_clients=self.n_clients,
            rounds=self.rounds,
            epsilon=self.epsilon,
            delta=self.delta,
            clip_c=self.clip_c,
            shard_size=self.shard_size,
            prox=ProximalConfig(
                mu=self.mu, inner_steps=self.inner_steps, learning_rate=self.learning_rate
            ),
            model=self.loss_spec(),
            schedule=self.schedule,
            k_clients=self.k_clients,
            uplink_exposures=self.uplink_exposures,
            master_seed=self.seed,
            noiseless=self.noiseless,
        )


def parse_config_text(text: str) -> RunConfigFile:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = _COMMENT.sub("", line).strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        raw[key] = value
    try:
        return RunConfigFile(**raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config schema: {e}") from e


def _render(value) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfigFile) -> str:
    lines = [
        f"{key} = {_render(value)}" for key, value in cfg.dict().items() if value is not None
    ]
    return "\n".join(lines) + "\n"


def load_config(path: Path) -> RunConfigFile:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    cfg = parse_config_text(path.read_text())
    logger.debug(f"Loaded config from {path}")
    return cfg


def resolve_data_path(name: str, data_dir: Optional[str] = None) -> Path:
    """Relative dataset paths are resolved against NBAFL_DATA_DIR when it is set."""
    path = Path(name)
    root = data_dir if data_dir is not None else os.environ.get(DATA_DIR_ENV)
    if path.is_absolute() or not root:
        return path
    return Path(root) / path


def _resolve_idx(name: str, data_dir: Optional[str]) -> Path:
    path = resolve_data_path(name, data_dir)
    gz = path.with_name(path.name + ".gz")
    if not path.exists() and gz.exists():
        return gz
    return path


def load_datasets(
    cfg: RunConfigFile, data_dir: Optional[str] = None
) -> tuple[LabeledDataset, LabeledDataset]:
    """Build the (train, test) datasets the config describes."""
    if cfg.dataset is DatasetKind.SYNTHETIC:
        full = synth_classification(
            cfg.synth_n + cfg.synth_test_n,
            cfg.synth_d,
            cfg.synth_classes,
            cfg.synth_margin,
            rngs.stream(cfg.data_seed, "synth"),
        )
        train = full.take(slice(0, cfg.synth_n))
        test = full.take(slice(cfg.synth_n, None))
    else:
        train = load_idx(
            _resolve_idx(cfg.mnist_images, data_dir), _resolve_idx(cfg.mnist_labels, data_dir)
        )
        test = load_idx(
            _resolve_idx(cfg.mnist_test_images, data_dir),
            _resolve_idx(cfg.mnist_test_labels, data_dir),
        )
    if cfg.test_subset is not None and cfg.test_subset < len(test):
        test = subset(test, cfg.test_subset, rngs.stream(cfg.data_seed, "subset"))
    return train, test
