"""Flat run configuration: model + training hyperparameters, file paths and the seed.

A config file is a YAML (or JSON) mapping of any subset of the keys below.
Command-line flags override file values; unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .featurizer import DihedralMode, Representation
from .model import ModelConfig
from .training import TrainConfig

PATH_KEYS = ("structures", "couplings", "charges", "dataset", "split", "checkpoint", "out")
RUN_KEYS = PATH_KEYS + ("representation", "preset", "record_id", "subset")
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")
PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    structures: str | None = None
    couplings: str | None = None
    charges: str | None = None
    dataset: str | None = None
    split: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    representation: str = Representation.E2_invariant.value
    preset: str = "desk"
    record_id: int | None = None
    subset: str = "test"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_flat(cls, values: dict) -> "RunConfig":
        """Build from one flat mapping; ``preset`` picks the model widths the other keys refine."""
        unknown = set(values) - set(RUN_KEYS) - set(MODEL_KEYS) - set(TRAIN_KEYS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        preset = values.get("preset", "desk")
        if preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
        base = ModelConfig.paper_scale() if preset == "paper" else ModelConfig()
        model_kw = {**base.to_dict(), **{k: values[k] for k in MODEL_KEYS if k in values}}
        seed = int(values.get("seed", 0))
        train_kw = {k: values[k] for k in TRAIN_KEYS if k in values}
        try:
            model = ModelConfig.from_dict(model_kw)
            train = TrainConfig.from_dict({**train_kw, "seed": seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        run = {k: values[k] for k in RUN_KEYS if k in values and values[k] is not None}
        cfg = cls(model=model, train=train, seed=seed, **run)
        valid = {r.value for r in Representation}
        if cfg.representation not in valid:
            raise ConfigError(f"representation must be one of {sorted(valid)}")
        if cfg.subset not in ("train", "val", "test", "all"):
            raise ConfigError("subset must be train, val, test or all")
        return cfg

    def to_flat(self) -> dict:
        out = {k: getattr(self, k) for k in RUN_KEYS if getattr(self, k) is not None}
        out["seed"] = self.seed
        out.update(self.model.to_dict())
        out.update({k: v for k, v in self.train.to_dict().items() if k != "seed"})
        return out

    @property
    def dihedral_mode(self) -> DihedralMode:
        return DihedralMode(self.model.dihedral_mode)

    def require(self, *keys: str) -> None:
        """Fail unless every path key is set and, for inputs, exists."""
        for k in keys:
            v = getattr(self, k)
            if v is None:
                raise ConfigError(f"missing required setting '{k}' (flag --{k.replace('_', '-')})")
            if k != "out" and not Path(v).exists():
                raise ConfigError(f"{k}: file not found: {v}")


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def resolve(file_values: dict, overrides: dict) -> RunConfig:
    """File values, then non-None overrides on top (flags win)."""
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_flat(merged)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True))
