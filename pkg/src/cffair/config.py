"""Run configuration: one JSON document, strictly validated and content-hashed."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .causal_vae import Scheme, Step1Config, Variant
from .dependence import HgrConfig
from .errors import ConfigError
from .predictor import Step2Config

SEED_ENV = "CF_FAIR_SEED"
DATASET_KINDS = ("synthetic_continuous", "synthetic_binary", "csv")


def _strict(cls, d: Any, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    return d


def _build(cls, d: Any, where: str):
    try:
        return cls(**_strict(cls, d, where))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DatasetSpec:
    kind: str = "synthetic_continuous"
    n: int = 5000
    path: Optional[str] = None
    schema_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind != "csv" and (not isinstance(self.n, int) or self.n < 1):
            raise ConfigError(f"dataset.n must be a positive integer, got {self.n!r}")
        if self.kind == "csv" and not (self.path and self.schema_path):
            raise ConfigError("dataset.kind 'csv' needs both path and schema_path")


@dataclass
class EvalSettings:
    count_per_individual: Optional[int] = None  # defaults: 1 binary, 1000 continuous
    hgr: dict = field(default_factory=lambda: HgrConfig().to_dict())
    factual: str = "raw"

    def __post_init__(self):
        if self.factual not in ("raw", "regenerated"):
            raise ConfigError("eval.factual must be 'raw' or 'regenerated'")
        if self.count_per_individual is not None and self.count_per_individual < 1:
            raise ConfigError("eval.count_per_individual must be >= 1")
        try:
            HgrConfig.from_dict(self.hgr)
        except TypeError as exc:
            raise ConfigError(f"eval.hgr: {exc}") from exc

    @property
    def hgr_config(self) -> HgrConfig:
        return HgrConfig.from_dict(self.hgr)


@dataclass
class PlotSettings:
    individual: int = 0
    grid_points: int = 200
    sampler_draws: int = 500
    sampler_steps: int = 300


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    scheme: Scheme = Scheme.XYA
    variant: Variant = Variant.ADVERSARIAL
    step1: Step1Config = field(default_factory=Step1Config)
    step2: Step2Config = field(default_factory=lambda: Step2Config(lam=5.0, mitigation="CF"))
    eval: EvalSettings = field(default_factory=EvalSettings)
    plot: PlotSettings = field(default_factory=PlotSettings)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    lambda_grid: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0])
    output_dir: str = "runs"

    def __post_init__(self):
        try:
            self.scheme, self.variant = Scheme(self.scheme), Variant(self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if not self.lambda_grid or any(float(v) < 0 for v in self.lambda_grid):
            raise ConfigError("lambda_grid must be a non-empty list of non-negative numbers")
        self.lambda_grid = sorted(float(v) for v in self.lambda_grid)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(_strict(cls, d, "config"))
        sub = {"dataset": DatasetSpec, "step1": Step1Config, "step2": Step2Config,
               "eval": EvalSettings, "plot": PlotSettings}
        for key, typ in sub.items():
            if key in d:
                d[key] = _build(typ, d[key], key)
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "scheme": self.scheme.value,
            "variant": self.variant.value,
            "step1": self.step1.to_dict(),
            "step2": self.step2.to_dict(),
            "eval": asdict(self.eval),
            "plot": asdict(self.plot),
            "seeds": list(self.seeds),
            "lambda_grid": list(self.lambda_grid),
            "output_dir": self.output_dir,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Identifies the experiment; where its outputs are written is not part of it."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``dotted.key=json_value`` overrides (plain strings need no quotes)."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"override {key!r}: {p!r} is not a section")
                node = node[p]
            node[parts[-1]] = value
        return RunConfig.from_dict(d)

    def with_env(self, environ=os.environ) -> "RunConfig":
        """``CF_FAIR_SEED`` replaces the seed list with that single seed."""
        raw = environ.get(SEED_ENV)
        if raw is None:
            return self
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
        d = self.to_dict()
        d["seeds"] = [seed]
        return RunConfig.from_dict(d)
