"""RMSE over the 8 emotion scores, per-emotion breakdown, and run ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataio import EMOTIONS, LABEL_MAX, LABEL_MIN, N_EMOTIONS, ScoreTable
from .errors import ManifestError, ValidationError


@dataclass(frozen=True)
class EvalReport:
    overall_rmse: float
    per_emotion_rmse: tuple[float, ...]
    n_utterances: int
    label: str = ""

    def metric_lines(self) -> list[tuple[str, str]]:
        rows = [("run", self.label), ("n_utterances", str(self.n_utterances)),
                ("overall_rmse", repr(self.overall_rmse))]
        rows += [(f"rmse_{e}", repr(v)) for e, v in zip(EMOTIONS, self.per_emotion_rmse)]
        return rows

    def format_metrics(self) -> str:
        """Machine-readable ``metric<TAB>value`` lines."""
        return "".join(f"{k}\t{v}\n" for k, v in self.metric_lines())

    def format_table(self) -> str:
        width = max(len(e) for e in EMOTIONS + ("overall",))
        lines = [f"run: {self.label}", f"utterances: {self.n_utterances}",
                 f"{'emotion':<{width}}  {'rmse':>10}", "-" * (width + 12)]
        lines += [f"{e:<{width}}  {v:>10.5f}" for e, v in zip(EMOTIONS, self.per_emotion_rmse)]
        lines += ["-" * (width + 12), f"{'overall':<{width}}  {self.overall_rmse:>10.5f}"]
        return "\n".join(lines) + "\n"


def check_aligned(pred_ids: Sequence[str], truth_ids: Sequence[str]) -> None:
    pred_set, truth_set = set(pred_ids), set(truth_ids)
    if pred_set == truth_set:
        if not pred_set:
            raise ManifestError("no utterances to evaluate")
        return
    missing = [i for i in truth_ids if i not in pred_set]
    extra = [i for i in pred_ids if i not in truth_set]
    parts = []
    if missing:
        parts.append(f"{len(missing)} ids missing from predictions: {', '.join(missing[:5])}")
    if extra:
        parts.append(f"{len(extra)} ids absent from ground truth: {', '.join(extra[:5])}")
    raise ManifestError("; ".join(parts))


def rmse(pred: ScoreTable, truth: ScoreTable | Mapping[str, np.ndarray], label: str | None = None) -> EvalReport:
    """Pooled RMSE over all N x 8 entries plus per-emotion RMSE over N entries.

    Sums use ``math.fsum`` so the result does not depend on summation order.
    """
    truth_scores = truth.scores if isinstance(truth, ScoreTable) else dict(truth)
    check_aligned(pred.ids, list(truth_scores))
    ids = list(truth_scores)
    P = pred.matrix(ids)
    Y = np.stack([np.asarray(truth_scores[i], dtype=np.float64) for i in ids])
    if Y.shape[1] != N_EMOTIONS or P.shape != Y.shape:
        raise ValidationError("score tables must hold 8 scores per utterance")
    if ((Y < LABEL_MIN) | (Y > LABEL_MAX)).any():
        raise ValidationError("ground-truth labels must lie in [1, 5]")
    sq = (P - Y) ** 2
    n = len(ids)
    per_emotion = tuple(math.sqrt(math.fsum(sq[:, j]) / n) for j in range(N_EMOTIONS))
    overall = math.sqrt(math.fsum(sq.ravel()) / (n * N_EMOTIONS))
    return EvalReport(overall, per_emotion, n, pred.label if label is None else label)


def rmse_arrays(pred: np.ndarray, truth: np.ndarray) -> float:
    """Pooled RMSE of two equally shaped arrays."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return math.sqrt(math.fsum((diff * diff).ravel()) / diff.size)


def compare_runs(reports: Sequence[EvalReport]) -> list[EvalReport]:
    """Stable ascending sort by overall RMSE (lower is better)."""
    return sorted(reports, key=lambda r: r.overall_rmse)


def format_comparison(reports: Sequence[EvalReport]) -> str:
    ranked = compare_runs(reports)
    width = max([len(r.label) for r in ranked] + [3])
    lines = [f"{'rank':>4}  {'run':<{width}}  {'rmse':>10}"]
    lines += [f"{k:>4}  {r.label:<{width}}  {r.overall_rmse:>10.5f}" for k, r in enumerate(ranked, 1)]
    return "\n".join(lines) + "\n"
