"""Score-level fusion of several model runs: mean, weighted mean, maximum."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .dataio import ScoreTable
from .errors import FusionError

RANK_WEIGHTS = (0.6, 0.2, 0.2)
WEIGHT_TOL = 1e-9
METHODS = ("average", "weighted", "max")


def _aligned_stack(tables: Sequence[ScoreTable]) -> tuple[list[str], np.ndarray]:
    """Return the shared id order and an ``(n_tables, N, 8)`` array."""
    if not tables:
        raise FusionError("at least one score table is required")
    ids = tables[0].ids
    ref = set(ids)
    for t in tables[1:]:
        other = set(t.ids)
        if other != ref:
            missing = sorted(ref - other)[:5]
            extra = sorted(other - ref)[:5]
            raise FusionError(
                f"table {t.label!r} is not aligned with {tables[0].label!r}: "
                f"missing {missing}, unexpected {extra}"
            )
    return ids, np.stack([t.matrix(ids) for t in tables])


def _result(label: str, ids: list[str], values: np.ndarray, tables: Sequence[ScoreTable]) -> ScoreTable:
    return ScoreTable.from_matrix(label, ids, values, tables[0].paths)


def fuse_average(tables: Sequence[ScoreTable], label: str = "average") -> ScoreTable:
    ids, S = _aligned_stack(tables)
    return _result(label, ids, S.sum(axis=0) / len(tables), tables)


def check_weights(weights: Sequence[float], n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise FusionError(f"expected {n} weights, got {w.size}")
    if not np.isfinite(w).all() or (w < 0).any():
        raise FusionError("fusion weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise FusionError(f"fusion weights sum to {w.sum()!r}, expected 1")
    return w


def fuse_weighted(tables: Sequence[ScoreTable], weights: Sequence[float], label: str = "weighted") -> ScoreTable:
    ids, S = _aligned_stack(tables)
    w = check_weights(weights, len(tables))
    return _result(label, ids, np.tensordot(w, S, axes=1), tables)


def fuse_max(tables: Sequence[ScoreTable], label: str = "max") -> ScoreTable:
    ids, S = _aligned_stack(tables)
    return _result(label, ids, S.max(axis=0), tables)


def assign_weights_by_val_rmse(runs: Sequence[tuple[str, float]]) -> list[float]:
    """0.6 to the lowest validation RMSE, 0.2 to the other two; original order kept.

    Ties are broken by run label.
    """
    if len(runs) != len(RANK_WEIGHTS):
        raise FusionError(f"rank weighting is defined for exactly {len(RANK_WEIGHTS)} runs, got {len(runs)}")
    labels = [label for label, _ in runs]
    if len(set(labels)) != len(labels):
        raise FusionError(f"run labels must be distinct: {labels}")
    ranked = sorted(range(len(runs)), key=lambda i: (runs[i][1], runs[i][0]))
    weights = [0.0] * len(runs)
    for rank, i in enumerate(ranked):
        weights[i] = RANK_WEIGHTS[rank]
    return weights


def fuse(method: str, tables: Sequence[ScoreTable], weights: Sequence[float] | None = None,
         label: str | None = None) -> ScoreTable:
    if method not in METHODS:
        raise FusionError(f"unknown fusion method {method!r}; choose from {METHODS}")
    label = label or method
    if method == "average":
        return fuse_average(tables, label)
    if method == "max":
        return fuse_max(tables, label)
    if weights is None:
        raise FusionError("weighted fusion needs weights")
    return fuse_weighted(tables, weights, label)
