"""Feature tensors, manifests and score tables on disk.

EMOF layout (little-endian)::

    0..3   magic  b"EMOF"
    4..7   version u32 (= 1)
    8..11  T u32 (frames)
    12..15 D u32 (feature dim)
    16..   T*D float32, row-major

Manifests and score tables are UTF-8, tab separated, one record per line.
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import FormatError, LengthError, ManifestError, ValidationError

EMOTIONS = (
    "sadness",
    "happiness",
    "relaxation",
    "surprise",
    "anger",
    "fear",
    "disgust",
    "neutral",
)
N_EMOTIONS = len(EMOTIONS)
LABEL_MIN, LABEL_MAX = 1.0, 5.0
SPLITS = ("train", "val", "test")

EMOF_MAGIC = b"EMOF"
EMOF_VERSION = 1
_HEADER = struct.Struct("<4sIII")
HEADER_SIZE = _HEADER.size  # 16

SCORES_HEADER = "# emoscore-scores v1"


# --------------------------------------------------------------------------
# Feature matrices
# --------------------------------------------------------------------------


def validate_features(m: np.ndarray) -> np.ndarray:
    """Return ``m`` as a C-contiguous float32 T x D array, or raise."""
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValidationError(f"feature matrix must be 2-D, got shape {arr.shape}")
    t, d = arr.shape
    if t < 1 or d < 1:
        raise ValidationError(f"feature matrix must have T >= 1 and D >= 1, got {t}x{d}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ValidationError("feature matrix contains non-finite values")
    return arr


def encode_feature_bytes(m: np.ndarray) -> bytes:
    arr = validate_features(m)
    t, d = arr.shape
    return _HEADER.pack(EMOF_MAGIC, EMOF_VERSION, t, d) + arr.astype("<f4", copy=False).tobytes()


def decode_feature_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < HEADER_SIZE:
        raise LengthError(f"{source}: {len(buf)} bytes is shorter than the {HEADER_SIZE}-byte EMOF header")
    magic, version, t, d = _HEADER.unpack_from(buf, 0)
    if magic != EMOF_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {EMOF_MAGIC!r}")
    if version != EMOF_VERSION:
        raise FormatError(f"{source}: unsupported EMOF version {version}")
    if t == 0 or d == 0:
        raise ValidationError(f"{source}: header declares empty matrix {t}x{d}")
    need = t * d * 4
    have = len(buf) - HEADER_SIZE
    if have != need:
        raise LengthError(f"{source}: payload has {have} bytes, header {t}x{d} requires {need}")
    arr = np.frombuffer(buf, dtype="<f4", count=t * d, offset=HEADER_SIZE).reshape(t, d)
    arr = arr.astype(np.float32)  # native byte order, writable copy
    if not np.isfinite(arr).all():
        raise ValidationError(f"{source}: payload contains non-finite values")
    return arr


def write_feature_file(m: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``m`` as an EMOF file. Validation happens before the file is touched."""
    data = encode_feature_bytes(m)
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write feature file {path}: {exc.strerror}") from exc


def read_feature_file(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read feature file {path}: {exc.strerror}") from exc
    return decode_feature_bytes(buf, str(path))


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


def validate_scores(values: Sequence[float], *, labels: bool, where: str = "") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (N_EMOTIONS,):
        raise ValidationError(f"{where}expected {N_EMOTIONS} emotion scores, got {arr.size}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{where}emotion scores must be finite")
    if labels and ((arr < LABEL_MIN) | (arr > LABEL_MAX)).any():
        raise ValidationError(
            f"{where}label outside [1, 5]; each emotion is rated on a scale of 1 to 5"
        )
    return arr


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    feature_path: str
    split: str
    labels: np.ndarray | None = None

    def __post_init__(self):
        if not self.id or any(c in self.id for c in "\t\n\r"):
            raise ManifestError(f"invalid utterance id {self.id!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"{self.id}: unknown split {self.split!r}")
        if self.labels is None and self.split != "test":
            raise ManifestError(f"{self.id}: labels are required for {self.split} records")


@dataclass
class DatasetManifest:
    records: list[UtteranceRecord]
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate utterance id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[UtteranceRecord]:
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == split], self.base_dir)

    def resolve(self, rec: UtteranceRecord) -> Path:
        p = Path(rec.feature_path)
        return p if p.is_absolute() else self.base_dir / p

    def labels(self) -> dict[str, np.ndarray]:
        return {r.id: r.labels for r in self.records if r.labels is not None}


def parse_manifest(text: str, base_dir: Path = Path("."), source: str = "<manifest>") -> DatasetManifest:
    records = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        where = f"{source}:{lineno}: "
        if len(fields) not in (3, 3 + N_EMOTIONS):
            raise ManifestError(f"{where}expected 3 or {3 + N_EMOTIONS} tab-separated fields, got {len(fields)}")
        uid, path, split = fields[:3]
        if uid in seen:
            raise ManifestError(f"{where}duplicate utterance id {uid!r} (first seen on line {seen[uid]})")
        seen[uid] = lineno
        labels = None
        if len(fields) > 3:
            try:
                raw = [float(x) for x in fields[3:]]
            except ValueError as exc:
                raise ManifestError(f"{where}unparseable label: {exc}") from None
            try:
                labels = validate_scores(raw, labels=True, where=where)
            except ValidationError as exc:
                raise ManifestError(str(exc)) from None
        try:
            records.append(UtteranceRecord(uid, path, split, labels))
        except ManifestError as exc:
            raise ManifestError(f"{where}{exc}") from None
    return DatasetManifest(records, base_dir)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent, str(path))


def _fmt(x: float) -> str:
    return repr(float(x))


def format_manifest(manifest: DatasetManifest | Iterable[UtteranceRecord]) -> str:
    lines = ["# id\tpath\tsplit\t" + "\t".join(EMOTIONS)]
    for rec in manifest:
        fields = [rec.id, rec.feature_path, rec.split]
        if rec.labels is not None:
            fields += [_fmt(v) for v in rec.labels]
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest | Iterable[UtteranceRecord], path: str | os.PathLike) -> None:
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


def load_features(manifest: DatasetManifest, expected_dim: int | None = None) -> dict[str, np.ndarray]:
    """Read every feature file in the manifest, checking D against ``expected_dim``."""
    out = {}
    for rec in manifest:
        m = read_feature_file(manifest.resolve(rec))
        if expected_dim is not None and m.shape[1] != expected_dim:
            raise ValidationError(
                f"utterance {rec.id}: feature dim {m.shape[1]} does not match model input dim {expected_dim}"
            )
        out[rec.id] = m
    return out


def split_dataset(manifest: DatasetManifest, val_fraction: float, seed: int) -> DatasetManifest:
    """Deterministically re-tag a train pool into train and val records."""
    if any(r.split != "train" for r in manifest):
        raise ManifestError("split_dataset expects a manifest holding only train-pool records")
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(manifest)
    n_val = int(math.floor(val_fraction * n + 0.5))
    if n_val == 0 or n_val == n:
        raise ValidationError(
            f"val_fraction={val_fraction} over {n} records leaves an empty "
            f"{'val' if n_val == 0 else 'train'} split"
        )
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    records = [replace(r, split="val" if i in val_idx else "train") for i, r in enumerate(manifest)]
    return DatasetManifest(records, manifest.base_dir)


# --------------------------------------------------------------------------
# Score tables
# --------------------------------------------------------------------------


@dataclass
class ScoreTable:
    """Predicted emotion scores of one model run, keyed by utterance id."""

    label: str
    scores: dict[str, np.ndarray]
    paths: dict[str, str] = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return list(self.scores)

    def matrix(self, ids: Sequence[str] | None = None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        if not ids:
            return np.zeros((0, N_EMOTIONS))
        return np.stack([self.scores[i] for i in ids])

    @classmethod
    def from_matrix(cls, label: str, ids: Sequence[str], values: np.ndarray,
                    paths: Mapping[str, str] | None = None) -> "ScoreTable":
        values = np.asarray(values, dtype=np.float64)
        return cls(label, {i: values[k].copy() for k, i in enumerate(ids)}, dict(paths or {}))


def format_score_table(table: ScoreTable, extra_header: Sequence[str] = ()) -> str:
    lines = [SCORES_HEADER, f"# run: {table.label}"]
    lines += [f"# {h}" for h in extra_header]
    for uid, vec in table.scores.items():
        vec = validate_scores(vec, labels=False, where=f"{uid}: ")
        lines.append("\t".join([uid, table.paths.get(uid, "-")] + [_fmt(v) for v in vec]))
    return "\n".join(lines) + "\n"


def write_score_table(table: ScoreTable, path: str | os.PathLike, extra_header: Sequence[str] = ()) -> None:
    Path(path).write_text(format_score_table(table, extra_header), encoding="utf-8")


def parse_score_table(text: str, source: str = "<scores>") -> ScoreTable:
    lines = text.splitlines()
    if not lines or lines[0].strip() != SCORES_HEADER:
        raise FormatError(f"{source}: missing header line {SCORES_HEADER!r}")
    label = Path(source).stem
    scores: dict[str, np.ndarray] = {}
    paths: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("# run:"):
            label = line[len("# run:"):].strip()
            continue
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        where = f"{source}:{lineno}: "
        # id, [path,] 8 scores
        if len(fields) == 2 + N_EMOTIONS:
            uid, path, raw = fields[0], fields[1], fields[2:]
        elif len(fields) == 1 + N_EMOTIONS:
            uid, path, raw = fields[0], None, fields[1:]
        else:
            raise ManifestError(f"{where}expected id, path and {N_EMOTIONS} scores, got {len(fields)} fields")
        if uid in scores:
            raise ManifestError(f"{where}duplicate utterance id {uid!r}")
        try:
            vec = validate_scores([float(x) for x in raw], labels=False, where=where)
        except ValueError as exc:
            raise ManifestError(f"{where}{exc}") from None
        scores[uid] = vec
        if path is not None and path != "-":
            paths[uid] = path
    return ScoreTable(label, scores, paths)


def read_score_table(path: str | os.PathLike) -> ScoreTable:
    path = Path(path)
    return parse_score_table(path.read_text(encoding="utf-8"), str(path))
