"""Experiment configuration: one JSON document with data, model, hp and ablation sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import BenchmarkSpec, DataError
from .losses import Hyperparams, LossError
from .model import Architecture, ModelError
from .training import VARIANTS, Ablation, TrainConfig


class ConfigError(ValueError):
    pass


CSV_KEYS = ("source", "target_train", "target_test")


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    data: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    csv: dict[str, str] | None = None
    model: Architecture = field(default_factory=Architecture)
    hp: Hyperparams = field(default_factory=Hyperparams)
    ablation: str = "full"
    out: str = "runs"
    workers: int = 1

    def validate(self) -> None:
        if self.ablation not in VARIANTS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {', '.join(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.csv is not None:
            missing = [k for k in CSV_KEYS if k not in self.csv]
            if missing:
                raise ConfigError(f"csv section lacks {missing}")
            for k in CSV_KEYS:
                if not Path(self.csv[k]).exists():
                    raise ConfigError(f"csv.{k}: no such file {self.csv[k]}")
        else:
            self.data.validate()
        if self.model.n_classes != self.data.n_classes and self.csv is None:
            raise ConfigError("model.n_classes must equal data.n_classes")

    @property
    def variant(self) -> Ablation:
        return VARIANTS[self.ablation]

    def train_config(self, seed: int | None = None, ablation: str | None = None) -> TrainConfig:
        return TrainConfig(seed=self.seed if seed is None else seed, hp=self.hp, arch=self.model,
                           ablation=VARIANTS[ablation or self.ablation])

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "seeds": list(self.seeds),
            "data": self.data.to_dict(),
            "csv": self.csv,
            "model": {**asdict(self.model), "hidden": list(self.model.hidden)},
            "hp": asdict(self.hp),
            "ablation": self.ablation,
            "out": self.out,
            "workers": self.workers,
        }


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {sorted(unknown)}")
    kw = dict(section)
    for k in ("hidden", "shift", "source_priors", "target_priors"):
        if k in kw and isinstance(kw[k], list):
            kw[k] = tuple(kw[k])
    try:
        return cls(**kw)
    except (TypeError, LossError, ModelError, DataError) as e:
        raise ConfigError(f"{name}: {e}") from e


def from_dict(d: dict) -> ExperimentConfig:
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    data = d.get("data") or {}
    if "csv" in data:
        raise ConfigError("put CSV paths in the top-level 'csv' section")
    cfg = ExperimentConfig(
        seed=int(d.get("seed", 0)),
        seeds=[int(s) for s in d.get("seeds", [0, 1, 2, 3, 4])],
        data=_build(BenchmarkSpec, data, "data"),
        csv=d.get("csv"),
        model=_build(Architecture, d.get("model") or {}, "model"),
        hp=_build(Hyperparams, d.get("hp") or {}, "hp"),
        ablation=d.get("ablation", "full"),
        out=str(d.get("out", "runs")),
        workers=int(d.get("workers", 1)),
    )
    if cfg.csv is not None and data:
        raise ConfigError("give either a data section or csv paths, not both")
    return cfg


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values parse as JSON when possible."""
    d = json.loads(json.dumps(d))
    for a in assignments:
        if "=" not in a:
            raise ConfigError(f"override {a!r} is not KEY=VALUE")
        key, value = a.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a section")
        node[parts[-1]] = _parse_scalar(value)
    return d


def load(path: str | None, overrides: list[str] | None = None) -> ExperimentConfig:
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = from_dict(apply_overrides(d, overrides or []))
    cfg.validate()
    return cfg
