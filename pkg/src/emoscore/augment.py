"""Additive noise augmentation applied directly to feature matrices.

The feature matrix is flattened (T*D values), a noise vector is truncated
or cyclically tiled to that length, and the two are summed whenever the
configured probability beats a uniform draw.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import read_feature_file, validate_features
from .errors import EmoscoreError, ValidationError


@dataclass(frozen=True)
class AugmentConfig:
    noise_probability: float = 0.0
    noise_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_probability <= 1.0:
            raise ValidationError(f"noise_probability must be in [0, 1], got {self.noise_probability}")
        if not np.isfinite(self.noise_gain) or self.noise_gain < 0:
            raise ValidationError(f"noise_gain must be finite and >= 0, got {self.noise_gain}")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


class NoiseBank(Sequence[np.ndarray]):
    """Immutable list of flattened, finite, non-empty noise vectors."""

    def __init__(self, entries):
        vecs = []
        for k, e in enumerate(entries):
            v = np.asarray(e, dtype=np.float32).ravel()
            if v.size == 0:
                raise ValidationError(f"noise entry {k} is empty")
            if not np.isfinite(v).all():
                raise ValidationError(f"noise entry {k} contains non-finite values")
            v.setflags(write=False)
            vecs.append(v)
        if not vecs:
            raise ValidationError("noise bank must contain at least one entry")
        self._entries = tuple(vecs)

    def __getitem__(self, i):
        return self._entries[i]

    def __len__(self):
        return len(self._entries)

    @classmethod
    def from_dir(cls, directory: str | os.PathLike) -> "NoiseBank":
        """Load every ``*.emof`` file under ``directory`` (sorted by path)."""
        directory = Path(directory)
        if not directory.is_dir():
            raise EmoscoreError(f"noise bank directory {directory} does not exist")
        files = sorted(directory.rglob("*.emof"))
        if not files:
            raise ValidationError(f"noise bank directory {directory} holds no .emof files")
        return cls(read_feature_file(f) for f in files)


def flattened_length(m: np.ndarray) -> int:
    t, d = np.shape(m)
    return int(t) * int(d)


def match_length(noise: np.ndarray, length: int) -> np.ndarray:
    """Truncate ``noise`` to ``length`` or repeat it cyclically until it fits."""
    noise = np.asarray(noise).ravel()
    if noise.size == 0:
        raise ValidationError("noise vector is empty")
    if length < 1:
        raise ValidationError(f"target length must be positive, got {length}")
    if noise.size >= length:
        return noise[:length].copy()
    reps = -(-length // noise.size)
    return np.tile(noise, reps)[:length]


def maybe_mix(m: np.ndarray, bank: NoiseBank, cfg: AugmentConfig,
              rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Gate-and-add one noise entry. Returns ``(features, mixed)``.

    Consumes one uniform draw for the gate and, only when mixing, one more
    integer draw for the bank entry.
    """
    u = rng.random()
    if not cfg.noise_probability > u:
        return m, False
    idx = int(rng.integers(len(bank)))
    if cfg.noise_gain == 0.0:
        # m + 0*noise could flip -0.0 to +0.0
        return m, True
    t, d = m.shape
    noise = match_length(bank[idx], t * d).reshape(t, d)
    with np.errstate(over="ignore"):
        out = (m.astype(np.float64) + cfg.noise_gain * noise.astype(np.float64)).astype(np.float32)
    if not np.isfinite(out).all():
        raise ValidationError(f"noise mixing with entry {idx} produced non-finite features")
    return out, True


def utterance_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent RNG stream for one (seed, epoch, utterance index) triple."""
    return np.random.default_rng([seed, epoch, index])


def augment_epoch(features: Sequence[np.ndarray], bank: NoiseBank | None, cfg: AugmentConfig,
                  epoch_index: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Apply :func:`maybe_mix` to every utterance for one epoch.

    ``features`` is indexed by utterance position. Returns the augmented
    list (unmixed entries are the original objects) and a boolean mask of
    which utterances were mixed.
    """
    n = len(features)
    mixed = np.zeros(n, dtype=bool)
    if bank is None or cfg.noise_probability == 0.0:
        if bank is None and cfg.noise_probability > 0.0:
            raise EmoscoreError("noise_probability > 0 requires a noise bank")
        return list(features), mixed
    out = []
    for i, m in enumerate(features):
        aug, mixed[i] = maybe_mix(m, bank, cfg, utterance_rng(cfg.seed, epoch_index, i))
        out.append(aug)
    return out, mixed


def mix_rate(bank: NoiseBank, cfg: AugmentConfig, calls: int, rng: np.random.Generator,
             m: np.ndarray | None = None) -> float:
    """Fraction of ``calls`` gated mixes drawn from a single stream."""
    m = validate_features(np.zeros((1, 1)) if m is None else m)
    hits = sum(maybe_mix(m, bank, cfg, rng)[1] for _ in range(calls))
    return hits / calls


__all__ = [
    "AugmentConfig",
    "NoiseBank",
    "augment_epoch",
    "flattened_length",
    "match_length",
    "maybe_mix",
    "mix_rate",
    "utterance_rng",
]
