"""Experiment configuration: one versioned JSON document, unknown keys rejected.

Layout::

    {
      "version": 1,
      "seed": 0,
      "out": "runs/moons",
      "dataset":  {"kind": "moons", "n": 2000, "noise": 0.1, "lift_dim": 20, "test_fraction": 0.25},
      "train":    {"loss_kind": "AT", "use_igr": true, "lam": 1.0, "epochs": 20, "attack": {...}},
      "attack":   {"epsilon": 0.1, "steps": 200, "restarts": 5, "k": 5},
      "eval":     {"m_eval": 50, "n_samples": 100, "pgd_steps": 20},
      "simulate": {"dim": 10000, "n_samples": 1000},
      "theorem":  {"dims": [3, 5, 10], "trials": 10000}
    }

Every section is optional.  The top-level ``seed`` is the single source of
randomness and overrides any ``train.seed``.  ``dataset.images`` and
``dataset.labels`` are resolved relative to the config file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attacks import AttackConfig
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


@dataclass
class DatasetSpec:
    kind: str = "moons"                 # moons, blobs or idx
    n: int = 2000
    noise: float = 0.1
    lift_dim: int | None = 20
    images: str | None = None
    labels: str | None = None
    limit: int | None = None
    test_fraction: float = 0.25

    def validate(self) -> None:
        if self.kind not in ("moons", "blobs", "idx"):
            raise ConfigError(f"dataset.kind must be moons, blobs or idx, got {self.kind!r}")
        if self.kind == "idx":
            for key in ("images", "labels"):
                path = getattr(self, key)
                if path is None:
                    raise ConfigError(f"dataset.{key} is required for kind 'idx'")
                if not Path(path).is_file():
                    raise ConfigError(f"dataset.{key}: file not found: {path}")
        elif self.n < 2:
            raise ConfigError("dataset.n must be >= 2")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("dataset.test_fraction must be in [0, 1)")


@dataclass
class EvalSpec:
    m_eval: int = 50
    n_samples: int | None = 100         # None evaluates the whole test split
    pgd_steps: int = 20
    absolute: bool = True

    def validate(self) -> None:
        if self.m_eval < 1:
            raise ConfigError("eval.m_eval must be >= 1")
        if self.n_samples is not None and self.n_samples < 0:
            raise ConfigError("eval.n_samples must be >= 0")
        if self.pgd_steps < 0:
            raise ConfigError("eval.pgd_steps must be >= 0")


@dataclass
class SimulateSpec:
    dim: int = 10000
    n_samples: int = 1000

    def validate(self) -> None:
        if self.dim < 2:
            raise ConfigError("simulate.dim must be >= 2")
        if self.n_samples < 0:
            raise ConfigError("simulate.n_samples must be >= 0")


@dataclass
class TheoremSpec:
    dims: list[int] = field(default_factory=lambda: [3, 5, 10])
    trials: int = 10000
    sequence_dims: list[int] = field(default_factory=lambda: list(range(2, 11)))
    sequence_trials: int = 500
    pearson_dim: int = 50

    def validate(self) -> None:
        if any(d < 2 for d in self.dims + self.sequence_dims):
            raise ConfigError("theorem dims must be >= 2")
        if self.trials < 1 or self.sequence_trials < 0:
            raise ConfigError("theorem trial counts must be positive")
        if self.pearson_dim < 3:
            raise ConfigError("theorem.pearson_dim must be >= 3")


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.1, steps=200, restarts=5, k=5))
    eval: EvalSpec = field(default_factory=EvalSpec)
    simulate: SimulateSpec = field(default_factory=SimulateSpec)
    theorem: TheoremSpec = field(default_factory=TheoremSpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["attack"]["clip_range"] = list(self.attack.clip_range)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_keys(cls, data, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _build(cls, data, where: str):
    _check_keys(cls, data, where)
    try:
        obj = cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return obj


def parse_config(data: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    _check_keys(ExperimentConfig, data, "config")
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {data.get('version')!r}")
    base = Path(base_dir)
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")

    ds = dict(data.get("dataset", {}))
    for key in ("images", "labels"):
        if ds.get(key) is not None:
            ds[key] = str((base / ds[key]).resolve()) if not Path(ds[key]).is_absolute() else ds[key]
    dataset = _build(DatasetSpec, ds, "dataset")

    tr = dict(data.get("train", {}))
    _check_keys(TrainConfig, tr, "train")
    if "attack" in tr:
        tr["attack"] = _build(AttackConfig, tr["attack"], "train.attack")
    tr["seed"] = seed
    train = _build(TrainConfig, tr, "train")

    attack = _build(AttackConfig, data["attack"], "attack") if "attack" in data else ExperimentConfig().attack
    return ExperimentConfig(
        version=CONFIG_VERSION,
        seed=seed,
        out=str(data.get("out", "runs/default")),
        dataset=dataset,
        train=train,
        attack=attack,
        eval=_build(EvalSpec, data.get("eval", {}), "eval"),
        simulate=_build(SimulateSpec, data.get("simulate", {}), "simulate"),
        theorem=_build(TheoremSpec, data.get("theorem", {}), "theorem"),
    )


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Read and validate a config file; ``seed``/``out`` override the file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    return parse_config(data, path.parent)
