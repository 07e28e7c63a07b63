"""Dynamic-window transformer regressor with a frozen backbone.

Forward path for one utterance ``X`` (T x D):

    input projection -> pre-norm encoder block -> importance from attention
    -> N x [window partition -> local window attention -> global window fusion]
    -> temporal mean pool -> FC1-ReLU-FC2-ReLU-FC3 -> 8 scores

Linear weights follow the ``(out, in)`` convention, ``y = x @ W.T + b``.
Parameters are stored in float32; activations are computed in float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .dataio import LABEL_MAX, LABEL_MIN, N_EMOTIONS
from .errors import ValidationError

LN_EPS = 1e-5
FF_MULT = 4
TRAINABLE = ("fc3.W", "fc3.b")
THRESHOLD_MODES = ("mean", "fixed")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    model_dim: int = 32
    heads: int = 4
    blocks: int = 2
    threshold_mode: str = "mean"
    threshold: float = 0.5
    max_window: int = 8
    hidden: tuple[int, int] = (64, 32)
    output_dim: int = N_EMOTIONS
    clamp_output: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, self.model_dim, self.heads, self.blocks, self.max_window, *self.hidden)
        if len(self.hidden) != 2 or any(int(v) < 1 for v in dims):
            raise ValidationError(f"all model dimensions must be >= 1: {self}")
        if self.model_dim % self.heads:
            raise ValidationError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.output_dim != N_EMOTIONS:
            raise ValidationError(f"output_dim must be {N_EMOTIONS}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValidationError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _linear_shapes(prefix: str, n_in: int, n_out: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.W", (n_out, n_in)), (f"{prefix}.b", (n_out,))]


def _attention_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for proj in ("q", "k", "v", "o"):
        out += _linear_shapes(f"{prefix}.{proj}", d, d)
    return out


def _norm_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` list; the order fixes init and checkpoint layout."""
    d = cfg.model_dim
    h1, h2 = cfg.hidden
    shapes = _linear_shapes("in_proj", cfg.input_dim, d)
    shapes += _norm_shapes("enc.ln1", d)
    shapes += _attention_shapes("enc.attn", d)
    shapes += _norm_shapes("enc.ln2", d)
    shapes += _linear_shapes("enc.ff1", d, FF_MULT * d)
    shapes += _linear_shapes("enc.ff2", FF_MULT * d, d)
    for k in range(cfg.blocks):
        for part in ("dlwt", "dgwt"):
            shapes += _attention_shapes(f"blk{k}.{part}.attn", d)
            shapes += _norm_shapes(f"blk{k}.{part}.ln", d)
    shapes += _linear_shapes("fc1", d, h1)
    shapes += _linear_shapes("fc2", h1, h2)
    shapes += _linear_shapes("fc3", h2, cfg.output_dim)
    return shapes


class ModelParams:
    """Named float32 tensors plus the frozen mask.

    Frozen tensors are marked read-only, so an accidental in-place update
    of the backbone raises instead of silently training it.
    """

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors: dict[str, np.ndarray] = {}
        for name, t in tensors.items():
            arr = np.array(t, dtype=np.float32)
            if not np.isfinite(arr).all():
                raise ValidationError(f"parameter {name} contains non-finite values")
            if name not in TRAINABLE:
                arr.setflags(write=False)
            self.tensors[name] = arr
        missing = [n for n in TRAINABLE if n not in self.tensors]
        if missing:
            raise ValidationError(f"missing trainable tensors {missing}")
        self._f64: dict[str, np.ndarray] = {}

    @classmethod
    def init(cls, cfg: ModelConfig) -> "ModelParams":
        rng = np.random.default_rng(cfg.seed)
        tensors = {}
        fan_in = {}
        for name, shape in parameter_shapes(cfg):
            prefix, kind = name.rsplit(".", 1)
            if prefix.split(".")[-1].startswith("ln"):
                tensors[name] = np.ones(shape) if kind == "g" else np.zeros(shape)
                continue
            if kind == "W":
                fan_in[prefix] = shape[1]
            bound = 1.0 / math.sqrt(fan_in[prefix])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(tensors)

    @property
    def frozen_mask(self) -> dict[str, bool]:
        return {name: name not in TRAINABLE for name in self.tensors}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def f64(self, name: str) -> np.ndarray:
        """float64 view of a tensor; frozen ones are converted once and cached."""
        if name in TRAINABLE:
            return self.tensors[name].astype(np.float64)
        cached = self._f64.get(name)
        if cached is None:
            cached = self._f64[name] = self.tensors[name].astype(np.float64)
        return cached

    def set_head(self, W: np.ndarray, b: np.ndarray) -> None:
        W = np.asarray(W, dtype=np.float32)
        b = np.asarray(b, dtype=np.float32)
        if W.shape != self.tensors["fc3.W"].shape or b.shape != self.tensors["fc3.b"].shape:
            raise ValidationError("head shapes do not match fc3")
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise ValidationError("head update is non-finite")
        self.tensors["fc3.W"] = W
        self.tensors["fc3.b"] = b

    def copy(self) -> "ModelParams":
        new = ModelParams.__new__(ModelParams)
        new.tensors = {n: (t.copy() if n in TRAINABLE else t) for n, t in self.tensors.items()}
        new._f64 = self._f64
        return new

    def check_shapes(self, cfg: ModelConfig) -> None:
        expected = parameter_shapes(cfg)
        if [n for n, _ in expected] != list(self.tensors):
            raise ValidationError("parameter names do not match the model configuration")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ValidationError(f"parameter {name} has shape {self.tensors[name].shape}, expected {shape}")


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis; ``-inf`` entries get zero weight."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray,
              mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention; leading dims are treated as a batch.

    ``mask[i, j]`` False forbids query ``i`` from attending to key ``j``.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2] or Q.shape[:-2] != K.shape[:-2]:
        raise ValidationError(f"attention shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    logits = Q @ np.swapaxes(K, -1, -2) / math.sqrt(Q.shape[-1])
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    A = softmax_rows(logits)
    return A @ V, A


def _linear(x: np.ndarray, params: ModelParams, prefix: str) -> np.ndarray:
    return x @ params.f64(f"{prefix}.W").T + params.f64(f"{prefix}.b")


def layer_norm(x: np.ndarray, params: ModelParams, prefix: str) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * params.f64(f"{prefix}.g") + params.f64(f"{prefix}.b")


def multi_head_attention(X: np.ndarray, params: ModelParams, prefix: str, heads: int,
                         mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Self-attention over rows of ``X``. Returns output and head-averaged weights."""
    T, d = X.shape
    dk = d // heads

    def split(a):
        return a.reshape(T, heads, dk).transpose(1, 0, 2)

    Q = split(_linear(X, params, f"{prefix}.q"))
    K = split(_linear(X, params, f"{prefix}.k"))
    V = split(_linear(X, params, f"{prefix}.v"))
    out, A = attention(Q, K, V, mask)
    out = out.transpose(1, 0, 2).reshape(T, d)
    return _linear(out, params, f"{prefix}.o"), A.mean(axis=0)


# --------------------------------------------------------------------------
# Blocks
# --------------------------------------------------------------------------


def encoder_block(X: np.ndarray, params: ModelParams, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pre-norm transformer encoder block."""
    a, A = multi_head_attention(layer_norm(X, params, "enc.ln1"), params, "enc.attn", cfg.heads)
    X1 = X + a
    ff = np.maximum(_linear(layer_norm(X1, params, "enc.ln2"), params, "enc.ff1"), 0.0)
    return X1 + _linear(ff, params, "enc.ff2"), A


def importance_scores(A: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    """Attention received per frame (column mean), min-max scaled to [0, 1]."""
    col = np.asarray(A, dtype=np.float64).mean(axis=0)
    lo, hi = col.min(), col.max()
    if hi - lo <= atol:
        return np.full(col.shape, 0.5)
    return (col - lo) / (hi - lo)


def partition_windows(importance: np.ndarray, max_window: int, threshold: float | None = None) -> list[tuple[int, int]]:
    """Split frames into maximal same-salience runs, each capped at ``max_window``.

    ``threshold=None`` uses the per-utterance mean importance.
    """
    I = np.asarray(importance, dtype=np.float64)
    T = I.shape[0]
    if T == 0:
        raise ValidationError("cannot partition an empty sequence")
    if max_window < 1:
        raise ValidationError("max_window must be >= 1")
    theta = float(I.mean()) if threshold is None else threshold
    salient = I >= theta
    windows = []
    start = 0
    for t in range(1, T + 1):
        if t == T or salient[t] != salient[start]:
            for s in range(start, t, max_window):
                windows.append((s, min(s + max_window, t)))
            start = t
    return windows


def window_ids(partition: list[tuple[int, int]], T: int) -> np.ndarray:
    ids = np.empty(T, dtype=np.int64)
    for w, (s, e) in enumerate(partition):
        ids[s:e] = w
    return ids


def validate_partition(partition: list[tuple[int, int]], T: int, max_window: int) -> None:
    pos = 0
    for s, e in partition:
        if s != pos or not 1 <= e - s <= max_window:
            raise ValidationError(f"invalid window ({s}, {e}) at frame {pos}")
        pos = e
    if pos != T:
        raise ValidationError(f"partition covers {pos} of {T} frames")


def dlwt_block(H: np.ndarray, partition: list[tuple[int, int]], params: ModelParams, prefix: str,
               heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Attention restricted to each window, then residual and layer norm.

    Returns the output and the T x T (block-diagonal) head-averaged weights.
    """
    ids = window_ids(partition, H.shape[0])
    mask = ids[:, None] == ids[None, :]
    a, A = multi_head_attention(H, params, f"{prefix}.attn", heads, mask)
    return layer_norm(H + a, params, f"{prefix}.ln"), A


def window_embeddings(H: np.ndarray, partition: list[tuple[int, int]], importance: np.ndarray) -> np.ndarray:
    rows = []
    for s, e in partition:
        w = importance[s:e]
        total = w.sum()
        w = np.full(e - s, 1.0 / (e - s)) if total <= 0 else w / total
        rows.append(w @ H[s:e])
    return np.stack(rows)


def dgwt_block(H: np.ndarray, partition: list[tuple[int, int]], importance: np.ndarray, params: ModelParams,
               prefix: str, heads: int) -> np.ndarray:
    """Fuse importance-pooled window embeddings globally and add them back per frame."""
    E = window_embeddings(H, partition, np.asarray(importance, dtype=np.float64))
    fused, _ = multi_head_attention(E, params, f"{prefix}.attn", heads)
    ids = window_ids(partition, H.shape[0])
    return layer_norm(H + fused[ids], params, f"{prefix}.ln")


# --------------------------------------------------------------------------
# Full model
# --------------------------------------------------------------------------


class ForwardResult(NamedTuple):
    scores: np.ndarray
    pooled: np.ndarray
    penultimate: np.ndarray


def backbone(X: np.ndarray, params: ModelParams, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Everything up to FC3: returns ``(pooled, penultimate)``."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ValidationError(f"expected features with D={cfg.input_dim}, got shape {X.shape}")
    threshold = cfg.threshold if cfg.threshold_mode == "fixed" else None
    H = _linear(X.astype(np.float64), params, "in_proj")
    H, A = encoder_block(H, params, cfg)
    imp = importance_scores(A)
    for k in range(cfg.blocks):
        part = partition_windows(imp, cfg.max_window, threshold)
        H, A = dlwt_block(H, part, params, f"blk{k}.dlwt", cfg.heads)
        imp = importance_scores(A)
        H = dgwt_block(H, part, imp, params, f"blk{k}.dgwt", cfg.heads)
    pooled = H.mean(axis=0)
    z = np.maximum(_linear(pooled, params, "fc1"), 0.0)
    z = np.maximum(_linear(z, params, "fc2"), 0.0)
    return pooled, z


def head(z: np.ndarray, params: ModelParams, clamp: bool = False) -> np.ndarray:
    """FC3 on penultimate activations (a vector or a batch of rows)."""
    out = np.asarray(z, dtype=np.float64) @ params.f64("fc3.W").T + params.f64("fc3.b")
    return np.clip(out, LABEL_MIN, LABEL_MAX) if clamp else out


def model_forward(X: np.ndarray, params: ModelParams, cfg: ModelConfig,
                  clamp: bool | None = None) -> ForwardResult:
    pooled, z = backbone(X, params, cfg)
    scores = head(z, params, cfg.clamp_output if clamp is None else clamp)
    return ForwardResult(scores, pooled, z)
