"""Versioned binary container for a model configuration and its parameters.

Layout (little-endian)::

    b"EMOC"  u32 version (= 1)
    u32 header_len, header_len bytes of UTF-8 JSON {"config": ..., "meta": ...}
    u32 n_tensors
    ceil(n_tensors / 8) bytes frozen bitmap (bit i, LSB first, = tensor i frozen)
    n_tensors x { u16 name_len, name, u8 rank, EMOF block }

Each EMOF block is a full EMOF record (16-byte header + float32 payload);
1-D tensors are stored as 1 x n matrices.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

from .dataio import HEADER_SIZE, decode_feature_bytes, encode_feature_bytes
from .errors import CheckpointError, EmoscoreError
from .model import TRAINABLE, ModelConfig, ModelParams, parameter_shapes

MAGIC = b"EMOC"
VERSION = 1


def encode_checkpoint(cfg: ModelConfig, params: ModelParams, meta: dict | None = None) -> bytes:
    params.check_shapes(cfg)
    header = json.dumps({"config": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    names = list(params.tensors)
    mask = params.frozen_mask
    bitmap = bytearray((len(names) + 7) // 8)
    for i, name in enumerate(names):
        if mask[name]:
            bitmap[i // 8] |= 1 << (i % 8)
    out = [MAGIC, struct.pack("<II", VERSION, len(header)), header,
           struct.pack("<I", len(names)), bytes(bitmap)]
    for name in names:
        t = params[name]
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        out.append(encode_feature_bytes(t.reshape(1, -1) if t.ndim == 1 else t))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes, source: str = "<checkpoint>",
                      expected: ModelConfig | None = None) -> tuple[ModelConfig, ModelParams, dict]:
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not an emoscore checkpoint")
    version, header_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(header_len).decode())
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError, EmoscoreError) as exc:
        raise CheckpointError(f"{source}: bad checkpoint header: {exc}") from None
    if expected is not None and expected != cfg:
        raise CheckpointError(f"{source}: checkpoint config {cfg} does not match expected {expected}")
    (n,) = r.unpack("<I")
    bitmap = r.take((n + 7) // 8)
    shapes = parameter_shapes(cfg)
    if n != len(shapes):
        raise CheckpointError(f"{source}: {n} tensors stored, configuration needs {len(shapes)}")
    tensors = {}
    for i, (want_name, want_shape) in enumerate(shapes):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<B")
        _, _, rows, cols = struct.unpack("<4sIII", r.buf[r.pos:r.pos + HEADER_SIZE].ljust(HEADER_SIZE, b"\0"))
        block = r.take(HEADER_SIZE + rows * cols * 4)
        try:
            arr = decode_feature_bytes(block, f"{source}:{name}")
        except EmoscoreError as exc:
            raise CheckpointError(str(exc)) from None
        if rank == 1:
            arr = arr.reshape(-1)
        if name != want_name or arr.shape != want_shape:
            raise CheckpointError(
                f"{source}: tensor {i} is {name}{arr.shape}, configuration expects {want_name}{want_shape}"
            )
        frozen = bool(bitmap[i // 8] >> (i % 8) & 1)
        tensors[name] = arr
        if frozen != (name not in TRAINABLE):
            raise CheckpointError(f"{source}: frozen mask disagrees for {name}")
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes")
    return cfg, ModelParams(tensors), header.get("meta", {})


def save_checkpoint(path: str | os.PathLike, cfg: ModelConfig, params: ModelParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(cfg, params, meta))


def load_checkpoint(path: str | os.PathLike,
                    expected: ModelConfig | None = None) -> tuple[ModelConfig, ModelParams, dict]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path), expected)
