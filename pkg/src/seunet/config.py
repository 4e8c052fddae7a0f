"""JSON run configuration tying all component configs together."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data.sampling import SamplerConfig
from .inference import EnsembleConfig
from .losses import LossConfig
from .model import ConfigError, ModelConfig
from .train import TrainConfig


@dataclass
class InferenceConfig:
    max_voxels: int | None = 200**3  # larger padded crops fall back to tiling
    window: int = 144
    stride: int = 96

    def __post_init__(self):
        if self.window < 16 or self.window % 16 or self.stride < 1:
            raise ValueError("window must be a positive multiple of 16 and stride positive")


@dataclass
class SplitConfig:
    kind: str = "loco"
    n_random_folds: int = 4
    val_fraction: float = 0.2
    fold: str | None = None  # train on this fold; None trains and validates on every case

    def __post_init__(self):
        if self.kind not in ("loco", "random"):
            raise ValueError(f"split kind must be loco or random, not {self.kind!r}")


_SECTIONS = {
    "model": ModelConfig,
    "sampler": SamplerConfig,
    "loss": LossConfig,
    "ensemble": EnsembleConfig,
    "inference": InferenceConfig,
    "split": SplitConfig,
}
_SCALARS = {"manifest": None, "output_dir": "out", "spacing": 1.0}


def _build(kind, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(values) - {f.name for f in fields(kind)}
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return kind(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    manifest: str | None = None
    output_dir: str = "out"
    spacing: float = 1.0

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        return {
            "model": self.model.to_dict(),
            "train": {k: v for k, v in train.items() if k not in ("loss", "sampler")},
            "sampler": train["sampler"],
            "loss": train["loss"],
            "ensemble": self.ensemble.to_dict(),
            "inference": asdict(self.inference),
            "split": asdict(self.split),
            "manifest": self.manifest,
            "output_dir": self.output_dir,
            "spacing": self.spacing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(d) - set(_SECTIONS) - set(_SCALARS) - {"train"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        parts = {name: _build(kind, d.get(name, {}), name) for name, kind in _SECTIONS.items()}
        train_d = d.get("train", {})
        if not isinstance(train_d, dict) or {"loss", "sampler"} & set(train_d):
            raise ConfigError("'train' must be an object; give 'loss' and 'sampler' as top-level sections")
        unknown = set(train_d) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown keys in 'train': {sorted(unknown)}")
        try:
            train = TrainConfig(**train_d, loss=parts.pop("loss"), sampler=parts.pop("sampler"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'train' section: {exc}") from exc
        scalars = {k: d.get(k, v) for k, v in _SCALARS.items()}
        if not (isinstance(scalars["spacing"], (int, float)) and scalars["spacing"] > 0):
            raise ConfigError("spacing must be a positive number")
        return cls(train=train, **parts, **scalars)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, assignments: list[str]) -> RunConfig:
        """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
        d = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section {p!r} in override {item!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return RunConfig.from_dict(d)
