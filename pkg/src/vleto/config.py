"""Experiment configuration: JSON in, validated dataclasses out."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError

ABLATIONS = ("no_ce", "no_a", "no_f", "no_lmo")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    n_samples: int = 2000
    n_features: int = 16
    n_classes: int = 8
    class_separation: float = 4.0
    path: str | None = None
    label_column: str = "label"
    partition: dict | None = None


@dataclass(frozen=True)
class Ablations:
    no_ce: bool = False
    no_a: bool = False
    no_f: bool = False
    no_lmo: bool = False

    def active(self) -> list[str]:
        return [name for name in ABLATIONS if getattr(self, name)]


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "CIL"
    data: DataConfig = field(default_factory=DataConfig)
    k_parties: int = 4
    d_emb: int = 16
    local_hidden: tuple[int, ...] = (32,)
    server_hidden: tuple[int, ...] = (32,)
    n_tasks: int = 4
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    lambda_ce: float = 0.5
    lambda_a: float = 0.5
    lambda_f: float = 0.5
    gamma: float = 0.5
    beta: float = 0.5
    k0: float = 15.0
    alpha: float = 3.0
    jitter_sigma: float = 0.0
    max_frozen_fraction: float = 0.9
    per_layer_threshold: bool = False
    accumulate_fisher: bool = False
    fil_target: str = "probe"
    growing_parties: tuple[int, ...] | None = None
    test_fraction: float = 0.2
    ablations: Ablations = field(default_factory=Ablations)
    seed: int = 0
    output_dir: str = "vleto-run"
    concurrent: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        if self.mode not in ("CIL", "FIL"):
            raise ConfigError("must be 'CIL' or 'FIL'", "mode")
        d = self.data
        if d.source not in ("synthetic", "csv"):
            raise ConfigError("must be 'synthetic' or 'csv'", "data.source")
        if d.source == "csv" and not d.path:
            raise ConfigError("required when source is 'csv'", "data.path")
        for name in ("n_samples", "n_features", "n_classes"):
            if getattr(d, name) < 1:
                raise ConfigError("must be >= 1", f"data.{name}")
        if not math.isfinite(d.class_separation) or d.class_separation < 0:
            raise ConfigError("must be finite and >= 0", "data.class_separation")
        for name in ("k_parties", "d_emb", "n_tasks", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        for name in ("local_hidden", "server_hidden"):
            if any(w < 1 for w in getattr(self, name)):
                raise ConfigError("hidden widths must be >= 1", name)
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError("must be > 0", "lr")
        for name in ("lambda_ce", "lambda_a", "lambda_f", "gamma", "jitter_sigma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError("must be finite and >= 0", name)
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("must lie in [0, 1]", "beta")
        for name in ("k0", "alpha"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError("must be finite", name)
        if not 0.0 <= self.max_frozen_fraction <= 1.0:
            raise ConfigError("must lie in [0, 1]", "max_frozen_fraction")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("must lie in (0, 1)", "test_fraction")
        if self.fil_target not in ("probe", "stored"):
            raise ConfigError("must be 'probe' or 'stored'", "fil_target")
        if self.growing_parties is not None and any(p < 0 or p >= self.k_parties for p in self.growing_parties):
            raise ConfigError("party id out of range", "growing_parties")

    # -- effective settings -------------------------------------------------

    @property
    def effective_weights(self) -> tuple[float, float, float]:
        a = self.ablations
        return (0.0 if a.no_ce else self.lambda_ce,
                0.0 if a.no_a else self.lambda_a,
                0.0 if a.no_f else self.lambda_f)

    @property
    def use_lmo(self) -> bool:
        return not self.ablations.no_lmo

    def with_overrides(self, **changes) -> "ExperimentConfig":
        if "ablations" in changes and isinstance(changes["ablations"], dict):
            changes["ablations"] = Ablations(**changes["ablations"])
        return replace(self, **changes)

    # -- (de)serialisation --------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["local_hidden"] = list(self.local_hidden)
        d["server_hidden"] = list(self.server_hidden)
        if self.growing_parties is not None:
            d["growing_parties"] = list(self.growing_parties)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown field(s) {sorted(unknown)}")
        kw = dict(raw)
        try:
            if "data" in kw:
                data = kw["data"]
                extra = set(data) - {f.name for f in fields(DataConfig)}
                if extra:
                    raise ConfigError(f"unknown field(s) {sorted(extra)}", "data")
                kw["data"] = DataConfig(**data)
            if "ablations" in kw:
                ab = kw["ablations"]
                if isinstance(ab, list):
                    ab = {name: True for name in ab}
                extra = set(ab) - set(ABLATIONS)
                if extra:
                    raise ConfigError(f"unknown ablation(s) {sorted(extra)}", "ablations")
                kw["ablations"] = Ablations(**{k: bool(v) for k, v in ab.items()})
            for name in ("local_hidden", "server_hidden", "growing_parties"):
                if kw.get(name) is not None:
                    kw[name] = tuple(int(v) for v in kw[name])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        _check_types(kw)
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


_INT_FIELDS = ("k_parties", "d_emb", "n_tasks", "epochs", "batch_size", "seed")
_FLOAT_FIELDS = ("lr", "lambda_ce", "lambda_a", "lambda_f", "gamma", "beta", "k0", "alpha",
                 "jitter_sigma", "max_frozen_fraction", "test_fraction")


def _check_types(kw: dict) -> None:
    for name in _INT_FIELDS:
        if name in kw and (isinstance(kw[name], bool) or not isinstance(kw[name], int)):
            raise ConfigError("must be an integer", name)
    for name in _FLOAT_FIELDS:
        if name in kw:
            if isinstance(kw[name], bool) or not isinstance(kw[name], (int, float)):
                raise ConfigError("must be a number", name)
            kw[name] = float(kw[name])
