"""TOML experiment configuration.

Relative paths are resolved against the directory holding the config
file. Every table is optional; a missing key takes the library default.

    seed = 0                      # base seed for every stage

    [synth]                       # keys of SynthSpec, plus:
    output_dir = "corpus"

    [model]                       # keys of ModelConfig

    [train]                       # keys of TrainConfig, plus:
    manifest = "corpus/train_pool.tsv"
    noise_dir = "corpus/noise"
    output_dir = "runs"
    val_fraction = 0.2
    noise_gain = 1.0

    [[train.runs]]
    label = "p0.3"
    noise_probability = 0.3
    manifest = "..."              # optional per-run feature manifest
    seed = 1                      # optional per-run seed

    [predict]
    checkpoint = "runs/p0.3/checkpoint.emoc"
    manifest = "corpus/test.tsv"
    output = "runs/p0.3/scores.tsv"
    split = "test"                # optional record filter

    [fuse]
    method = "average"            # average | weighted | max
    inputs = ["a.tsv", "b.tsv", "c.tsv"]
    val_rmse = "runs/val_rmse.tsv"
    output = "fused.tsv"

    [evaluate]
    predictions = ["fused.tsv"]
    truth = "corpus/test.tsv"
    output_dir = "reports"
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentConfig
from .errors import ValidationError
from .fusion import METHODS
from .model import ModelConfig
from .synthdata import SynthSpec
from .train import TrainConfig

_TRAIN_EXTRA = {"manifest", "noise_dir", "output_dir", "val_fraction", "noise_gain", "runs"}


@dataclass
class RunSpec:
    label: str
    manifest: Path
    noise_probability: float = 0.0
    seed: int | None = None


@dataclass
class ExperimentConfig:
    base_dir: Path = field(default_factory=Path.cwd)
    seed: int = 0
    raw: dict[str, Any] = field(default_factory=dict)

    def section(self, name: str) -> dict[str, Any]:
        sec = self.raw.get(name, {})
        if not isinstance(sec, dict):
            raise ValidationError(f"[{name}] must be a table")
        return sec

    def path(self, value: str | os.PathLike | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    # -- stage views ---------------------------------------------------

    def synth_spec(self) -> tuple[SynthSpec, Path]:
        sec = dict(self.section("synth"))
        out = self.path(sec.pop("output_dir", "corpus"))
        sec.setdefault("seed", self.seed)
        return SynthSpec.from_dict(sec), out

    def model_config(self, seed: int | None = None) -> ModelConfig:
        sec = dict(self.section("model"))
        if "hidden" in sec:
            sec["hidden"] = tuple(sec["hidden"])
        if seed is not None:
            sec["seed"] = seed
        sec.setdefault("seed", self.seed)
        return ModelConfig.from_dict(sec)

    def train_settings(self) -> dict[str, Any]:
        sec = self.section("train")
        return {
            "manifest": self.path(sec.get("manifest")),
            "noise_dir": self.path(sec.get("noise_dir")),
            "output_dir": self.path(sec.get("output_dir", "runs")),
            "val_fraction": float(sec.get("val_fraction", 0.2)),
            "noise_gain": float(sec.get("noise_gain", 1.0)),
        }

    def train_config(self, run: RunSpec) -> TrainConfig:
        sec = {k: v for k, v in self.section("train").items() if k not in _TRAIN_EXTRA}
        known = {f.name for f in fields(TrainConfig)} - {"augment"}
        unknown = set(sec) - known
        if unknown:
            raise ValidationError(f"unknown [train] keys: {sorted(unknown)}")
        seed = self.run_seed(run)
        sec["seed"] = seed
        augment = AugmentConfig(run.noise_probability, self.train_settings()["noise_gain"], seed)
        return TrainConfig(**sec, augment=augment)

    def run_seed(self, run: RunSpec) -> int:
        if run.seed is not None:
            return run.seed
        return int(self.section("train").get("seed", self.seed))

    def runs(self) -> list[RunSpec]:
        settings = self.train_settings()
        raw_runs = self.section("train").get("runs") or [{"label": "run", "noise_probability": 0.0}]
        runs = []
        for r in raw_runs:
            unknown = set(r) - {"label", "manifest", "noise_probability", "seed"}
            if unknown:
                raise ValidationError(f"unknown [[train.runs]] keys: {sorted(unknown)}")
            if "label" not in r:
                raise ValidationError("every [[train.runs]] entry needs a label")
            manifest = self.path(r.get("manifest")) or settings["manifest"]
            if manifest is None:
                raise ValidationError(f"run {r['label']!r} has no feature manifest")
            runs.append(RunSpec(str(r["label"]), manifest, float(r.get("noise_probability", 0.0)), r.get("seed")))
        labels = [r.label for r in runs]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"run labels must be unique: {labels}")
        for r in runs:
            if not r.label or any(c in r.label for c in "/\\\t\n"):
                raise ValidationError(f"run label {r.label!r} is not usable as a directory name")
        return runs

    def fuse_method(self, override: str | None = None) -> str:
        method = override or self.section("fuse").get("method", "average")
        if method not in METHODS:
            raise ValidationError(f"unknown fusion method {method!r}; choose from {METHODS}")
        return method


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    with path.open("rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    seed = raw.pop("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ValidationError(f"{path}: seed must be a non-negative integer")
    unknown = set(raw) - {"synth", "model", "train", "predict", "fuse", "evaluate"}
    if unknown:
        raise ValidationError(f"{path}: unknown sections {sorted(unknown)}")
    return ExperimentConfig(path.resolve().parent, seed, raw)
