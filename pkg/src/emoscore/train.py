"""Head-only fine-tuning: MSE loss, analytic FC3 gradient, Adam, plateau LR.

Only ``fc3.W`` and ``fc3.b`` move. Because the backbone is frozen, the
penultimate activations of an utterance only change when augmentation
changes its features, so clean activations are computed once and reused.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._parallel import parallel_map
from .augment import AugmentConfig, NoiseBank, augment_epoch
from .dataio import DatasetManifest, load_features
from .errors import TrainingError, ValidationError
from .evaluation import rmse_arrays
from .model import TRAINABLE, ModelConfig, ModelParams, backbone, head

log = logging.getLogger(__name__)

_SHUFFLE_TAG = 0x5348554646  # keeps shuffle streams apart from augmentation streams


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    threshold: float = 1e-6
    max_epochs: int = 20
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValidationError("lr0 must be positive")
        if not 0 < self.factor < 1:
            raise ValidationError("factor must lie in (0, 1)")
        if self.patience < 1 or self.batch_size < 1:
            raise ValidationError("patience and batch_size must be >= 1")
        if self.max_epochs < 0 or self.weight_decay < 0 or self.min_lr < 0:
            raise ValidationError("max_epochs, weight_decay and min_lr must be non-negative")
        if self.min_lr > self.lr0:
            raise ValidationError("min_lr must not exceed lr0")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int
    lr: float
    best: float = math.inf
    bad_epochs: int = 0

    @classmethod
    def create(cls, params: ModelParams, cfg: TrainConfig) -> "OptimizerState":
        zeros = {n: np.zeros(params[n].shape) for n in TRAINABLE}
        return cls(m=zeros, v={n: z.copy() for n, z in zeros.items()}, t=0, lr=cfg.lr0)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    lr: float

    def format(self) -> str:
        return f"{self.epoch}\t{self.train_loss!r}\t{self.val_rmse!r}\t{self.lr!r}"


def format_history(history: Sequence[EpochRecord]) -> str:
    return "".join(r.format() + "\n" for r in history)


def mse_loss(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Mean squared error over every sample and all 8 emotions."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValidationError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    diff = y - y_hat
    return float(np.mean(diff * diff))


def head_gradient(z: np.ndarray, y: np.ndarray, y_hat: np.ndarray,
                  clamp: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the batch MSE with respect to FC3 ``(W, b)``.

    ``z`` is ``(n, h2)``, ``y`` and ``y_hat`` are ``(n, 8)``; a single
    sample may be passed as 1-D vectors.
    """
    if clamp:
        raise TrainingError("head gradient is undefined for clamped outputs")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=np.float64))
    n, k = y.shape
    if y_hat.shape != (n, k) or z.shape[0] != n:
        raise ValidationError("batch shapes do not agree")
    resid = (2.0 / k) * (y_hat - y)  # dL_i/dy_hat_i
    return resid.T @ z / n, resid.mean(axis=0)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
              cfg: TrainConfig) -> OptimizerState:
    """One Adam update of the head with coupled L2 weight decay."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    new = {}
    for name in TRAINABLE:
        theta = params[name].astype(np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        g = g + cfg.weight_decay * theta
        m = state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        theta = theta - state.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if not np.isfinite(theta).all():
            raise TrainingError(f"non-finite Adam update for {name} at step {state.t}")
        new[name] = theta
    params.set_head(new["fc3.W"], new["fc3.b"])
    return state


def plateau_scheduler(state: OptimizerState, val_rmse: float, cfg: TrainConfig) -> OptimizerState:
    if val_rmse < state.best - cfg.threshold:
        state.best = val_rmse
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
    if state.bad_epochs > cfg.patience:
        state.lr = max(state.lr * cfg.factor, cfg.min_lr)
        state.bad_epochs = 0
    return state


def penultimate(features: Sequence[np.ndarray], params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Stack the frozen-backbone activations feeding FC3, one row per utterance."""
    if not features:
        return np.zeros((0, cfg.hidden[1]))
    return np.stack(parallel_map(lambda X: backbone(X, params, cfg)[1], features))


def train(manifest: DatasetManifest, bank: NoiseBank | None, model_cfg: ModelConfig, params: ModelParams,
          cfg: TrainConfig, features: dict[str, np.ndarray] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[ModelParams, list[EpochRecord]]:
    """Fit FC3 on the train split; return the best-on-validation params and history."""
    train_m, val_m = manifest.subset("train"), manifest.subset("val")
    if not len(train_m) or not len(val_m):
        raise TrainingError(f"train and val splits must be non-empty (got {len(train_m)} / {len(val_m)})")
    if cfg.augment.noise_probability > 0 and bank is None:
        raise TrainingError("noise_probability > 0 requires a noise bank")
    if features is None:
        features = load_features(DatasetManifest(train_m.records + val_m.records, manifest.base_dir),
                                 model_cfg.input_dim)
    for rec in list(train_m) + list(val_m):
        if features[rec.id].shape[1] != model_cfg.input_dim:
            raise ValidationError(f"utterance {rec.id}: feature dim does not match model input dim")
    params.check_shapes(model_cfg)
    params = params.copy()
    if cfg.max_epochs == 0:
        return params, []

    X_train = [features[r.id] for r in train_m]
    Y_train = np.stack([r.labels for r in train_m])
    Y_val = np.stack([r.labels for r in val_m])
    Z_val = penultimate([features[r.id] for r in val_m], params, model_cfg)
    Z_clean = penultimate(X_train, params, model_cfg)

    state = OptimizerState.create(params, cfg)
    best_rmse, best_head = math.inf, (params["fc3.W"].copy(), params["fc3.b"].copy())
    history: list[EpochRecord] = []
    n = len(X_train)
    for epoch in range(cfg.max_epochs):
        augmented, mixed = augment_epoch(X_train, bank, cfg.augment, epoch)
        Z = Z_clean
        if mixed.any():
            Z = Z_clean.copy()
            idx = np.flatnonzero(mixed)
            Z[idx] = penultimate([augmented[i] for i in idx], params, model_cfg)
        order = np.random.default_rng([_SHUFFLE_TAG, cfg.seed, epoch]).permutation(n)
        lr_used = state.lr
        loss_sum = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            y_hat = head(Z[batch], params)
            loss = mse_loss(Y_train[batch], y_hat)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            dW, db = head_gradient(Z[batch], Y_train[batch], y_hat)
            adam_step(params, {"fc3.W": dW, "fc3.b": db}, state, cfg)
            loss_sum += loss * len(batch)
        val = rmse_arrays(head(Z_val, params), Y_val)
        rec = EpochRecord(epoch + 1, loss_sum / n, val, lr_used)
        history.append(rec)
        log.info("epoch %d train_loss %.6f val_rmse %.6f lr %.3g mixed %d/%d",
                 rec.epoch, rec.train_loss, rec.val_rmse, lr_used, int(mixed.sum()), n)
        if on_epoch is not None:
            on_epoch(rec)
        if val < best_rmse:
            best_rmse, best_head = val, (params["fc3.W"].copy(), params["fc3.b"].copy())
        plateau_scheduler(state, val, cfg)
    params.set_head(*best_head)
    return params, history


def best_val_rmse(history: Sequence[EpochRecord]) -> float:
    return min((r.val_rmse for r in history), default=math.nan)


__all__ = [
    "EpochRecord",
    "OptimizerState",
    "TrainConfig",
    "adam_step",
    "best_val_rmse",
    "format_history",
    "head_gradient",
    "mse_loss",
    "penultimate",
    "plateau_scheduler",
    "train",
]
