"""Run configuration: one canonical JSON document for a whole command."""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Optional

from config import DEFAULT_SEED, MANIFEST_FILE_NAME, RUN_CONFIG_NAME
from packages.data_gathering.synthetic import SyntheticSpec
from packages.helpers.errors import ConfigError, DataIOError, VersionMismatchError
from packages.model.model_config import ModelConfig, strict_from_dict
from packages.trainer.train_config import TrainConfig

logger = logging.getLogger("RunConfig")

CONFIG_VERSION = 1


@dataclass
class PathsConfig:
    out: str = "runs/default"
    data: str = "data/synthetic"
    manifest: str = ""
    checkpoint: str = ""
    bag: str = ""

    def manifest_path(self) -> str:
        return self.manifest or os.path.join(self.data, MANIFEST_FILE_NAME)


@dataclass
class RunConfig:
    """
    Model, training, synthetic-data and path settings of one run.

    The top-level ``seed`` is copied into every section and
    ``train.lambda_balance`` into ``model.lambda_balance``.
    """

    version: int = CONFIG_VERSION
    seed: int = DEFAULT_SEED
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise VersionMismatchError(f"run config version {self.version}, this build reads {CONFIG_VERSION}")
        self.sync()

    def sync(self) -> "RunConfig":
        self.train = replace(self.train, seed=self.seed)
        self.synthetic = replace(self.synthetic, seed=self.seed)
        self.model = replace(self.model, seed=self.seed, lambda_balance=self.train.lambda_balance)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synthetic": self.synthetic.to_dict(),
            "paths": asdict(self.paths),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RunConfig":
        known = {"version", "seed", "model", "train", "synthetic", "paths"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown run config keys: {', '.join(unknown)}")
        return cls(
            version=values.get("version", CONFIG_VERSION),
            seed=int(values.get("seed", DEFAULT_SEED)),
            model=ModelConfig.from_dict(values.get("model", {})),
            train=TrainConfig.from_dict(values.get("train", {})),
            synthetic=SyntheticSpec.from_dict(values.get("synthetic", {})),
            paths=strict_from_dict(PathsConfig, values.get("paths", {}), "paths"),
        )


def load_run_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            values = json.load(f)
    except OSError as e:
        logger.error(f"Could not read config {path}: {e}")
        raise DataIOError(f"could not read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return RunConfig.from_dict(values)


_FLAG_TARGETS = {
    "seed": ("", "seed"),
    "out": ("paths", "out"),
    "data": ("paths", "data"),
    "manifest": ("paths", "manifest"),
    "checkpoint": ("paths", "checkpoint"),
    "bag": ("paths", "bag"),
    "variant": ("model", "variant"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "lr"),
    "lambda_balance": ("train", "lambda_balance"),
    "classes": ("synthetic", "n_classes"),
    "slides_per_class": ("synthetic", "slides_per_class"),
}


def apply_overrides(cfg: RunConfig, flags: Dict[str, Any]) -> RunConfig:
    """Command-line flags win over the file; None means the flag was not given."""
    values = cfg.to_dict()
    for flag, value in flags.items():
        if value is None or flag not in _FLAG_TARGETS:
            continue
        section, key = _FLAG_TARGETS[flag]
        if section:
            values[section][key] = value
        else:
            values[key] = value
    if flags.get("lambda_balance") is not None:
        values["model"]["lambda_balance"] = flags["lambda_balance"]
    return RunConfig.from_dict(values)


def write_run_config(cfg: RunConfig, directory: str) -> str:
    path = os.path.join(directory, RUN_CONFIG_NAME)
    try:
        os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(cfg.to_json() + "\n")
    except OSError as e:
        logger.error(f"Could not write {path}: {e}")
        raise DataIOError(f"could not write {path}: {e}") from e
    return path
