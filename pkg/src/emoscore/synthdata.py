"""Synthetic corpus with a planted linear emotion signal.

Each utterance gets i.i.d. standard-normal frames; its labels are
``clip(B @ mean_t(X) + c + noise, 1, 5)``. With no label noise the
mean-pooled features explain the labels exactly (up to clipping), which
gives a model-independent least-squares reference.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    LABEL_MAX,
    LABEL_MIN,
    N_EMOTIONS,
    DatasetManifest,
    UtteranceRecord,
    write_feature_file,
    write_manifest,
)
from .errors import ValidationError

TRAIN_POOL_FILE = "train_pool.tsv"
TEST_FILE = "test.tsv"
SPEC_FILE = "synth_spec.json"


@dataclass
class SynthSpec:
    n_train_pool: int = 160
    n_test: int = 40
    t_min: int = 20
    t_max: int = 60
    input_dim: int = 16
    signal_scale: float = 1.0
    planted_map: list[list[float]] | None = None
    offset: list[float] = field(default_factory=lambda: [3.0] * N_EMOTIONS)
    label_noise_sd: float = 0.1
    noise_entries: int = 4
    noise_len_min: int = 64
    noise_len_max: int = 2048
    noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_train_pool < 0 or self.n_test < 0 or self.n_train_pool + self.n_test < 1:
            raise ValidationError("corpus must hold at least one utterance")
        if not 1 <= self.t_min <= self.t_max:
            raise ValidationError(f"invalid frame range [{self.t_min}, {self.t_max}]")
        if self.input_dim < 1:
            raise ValidationError("input_dim must be >= 1")
        if self.label_noise_sd < 0 or self.noise_sd < 0 or self.signal_scale < 0:
            raise ValidationError("standard deviations and scales must be >= 0")
        if self.noise_entries < 1 or not 1 <= self.noise_len_min <= self.noise_len_max:
            raise ValidationError("noise bank needs >= 1 entry with a valid length range")
        if len(self.offset) != N_EMOTIONS:
            raise ValidationError(f"offset must have {N_EMOTIONS} entries")
        if self.planted_map is not None:
            B = np.asarray(self.planted_map, dtype=np.float64)
            if B.shape != (N_EMOTIONS, self.input_dim):
                raise ValidationError(f"planted_map must be {N_EMOTIONS} x {self.input_dim}, got {B.shape}")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)

    def resolved_map(self) -> tuple[np.ndarray, np.ndarray]:
        """``(B, c)``; B is drawn from the seed when not given explicitly."""
        if self.planted_map is not None:
            B = np.asarray(self.planted_map, dtype=np.float64)
        else:
            B = np.random.default_rng([self.seed, 0]).normal(0.0, self.signal_scale, (N_EMOTIONS, self.input_dim))
        return B, np.asarray(self.offset, dtype=np.float64)


@dataclass
class Corpus:
    train_pool: DatasetManifest
    test: DatasetManifest
    noise_dir: Path
    planted_map: np.ndarray
    offset: np.ndarray


def utterance(spec: SynthSpec, index: int, B: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 1, index])
    T = int(rng.integers(spec.t_min, spec.t_max + 1))
    X = rng.standard_normal((T, spec.input_dim)).astype(np.float32)
    y = B @ X.astype(np.float64).mean(axis=0) + c
    if spec.label_noise_sd > 0:
        y = y + rng.normal(0.0, spec.label_noise_sd, N_EMOTIONS)
    return X, np.clip(y, LABEL_MIN, LABEL_MAX)


def noise_entry(spec: SynthSpec, k: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 2, k])
    n = int(rng.integers(spec.noise_len_min, spec.noise_len_max + 1))
    return rng.normal(0.0, spec.noise_sd, (1, n)).astype(np.float32)


def generate(spec: SynthSpec, out_dir: str | os.PathLike) -> Corpus:
    """Write features, noise bank, manifests and the resolved spec under ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "noise").mkdir(exist_ok=True)
    B, c = spec.resolved_map()
    records = []
    for i in range(spec.n_train_pool + spec.n_test):
        X, y = utterance(spec, i, B, c)
        uid = f"utt{i:05d}"
        rel = f"features/{uid}.emof"
        write_feature_file(X, out / rel)
        records.append(UtteranceRecord(uid, rel, "train" if i < spec.n_train_pool else "test", y))
    for k in range(spec.noise_entries):
        write_feature_file(noise_entry(spec, k), out / "noise" / f"noise{k:03d}.emof")
    pool = DatasetManifest(records[: spec.n_train_pool], out)
    test = DatasetManifest(records[spec.n_train_pool:], out)
    write_manifest(pool, out / TRAIN_POOL_FILE)
    write_manifest(test, out / TEST_FILE)
    resolved = asdict(spec) | {"planted_map": B.tolist(), "offset": c.tolist()}
    (out / SPEC_FILE).write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Corpus(pool, test, out / "noise", B, c)


def least_squares_reference(features: list[np.ndarray], labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fit ``labels ~ B @ mean_t(X) + c`` by ordinary least squares; returns ``(B, c)``."""
    M = np.stack([np.asarray(X, dtype=np.float64).mean(axis=0) for X in features])
    A = np.hstack([M, np.ones((len(M), 1))])
    sol, *_ = np.linalg.lstsq(A, np.asarray(labels, dtype=np.float64), rcond=None)
    return sol[:-1].T, sol[-1]
