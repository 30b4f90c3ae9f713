"""Run configuration: one JSON document covering model, data, and training.

Parsing is strict: any key that does not correspond to a dataclass field
is rejected with the section it appeared in, so typos fail fast instead
of silently falling back to defaults. Sections may be given partially;
missing fields keep their defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .data import AugmentConfig
from .grid import GridSpec, symmetric_columns
from .train import TrainConfig


class ConfigError(ValueError):
    """Bad structure or values in a run configuration."""


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_eval: int = 50
    width: int = 64
    height: int = 64
    max_shapes: int = 8

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 0:
            raise ValueError(f"need n_train >= 1 and n_eval >= 0, got "
                             f"{self.n_train}, {self.n_eval}")


@dataclass(frozen=True)
class EvalConfig:
    scales: tuple[float, ...] = (1.0,)
    categories: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales:
            raise ValueError("eval.scales must not be empty")


def _default_grid() -> GridSpec:
    return GridSpec(5, symmetric_columns(2, 2), base_channels=4, num_classes=4)


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec = field(default_factory=_default_grid)
    data: DataConfig = DataConfig()
    augment: AugmentConfig = AugmentConfig(crop_min=32, crop_max=64, out_size=64)
    train: TrainConfig = TrainConfig(epochs=40, batch_size=4, lr=3e-3)
    eval: EvalConfig = EvalConfig()
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "data": dataclasses.asdict(self.data),
            "augment": dataclasses.asdict(self.augment),
            "train": self.train.to_dict(),
            "eval": {"scales": list(self.eval.scales),
                     "categories": self.eval.categories},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"config must be a JSON object, got {type(d).__name__}")
        base = cls()
        unknown = set(d) - {"grid", "data", "augment", "train", "eval", "seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        out = {}
        out["grid"] = _merge_section("grid", base.grid, d.get("grid"), GridSpec)
        out["data"] = _merge_section("data", base.data, d.get("data"), DataConfig)
        out["augment"] = _merge_section("augment", base.augment, d.get("augment"),
                                        AugmentConfig)
        out["train"] = _merge_section("train", base.train, d.get("train"), TrainConfig)
        out["eval"] = _merge_section("eval", base.eval, d.get("eval"), EvalConfig)
        seed = d.get("seed", base.seed)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        out["seed"] = seed
        return cls(**out)


def _merge_section(name: str, base, d, cls):
    if d is None:
        return base
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return dataclasses.replace(base, **d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section {name!r}: {e}") from None


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return RunConfig.from_dict(doc)
