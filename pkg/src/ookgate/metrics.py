"""Detection metrics and the balanced repeated-sampling evaluation protocol.

Scores are oriented so that larger means "predicted out-of-knowledge"; OoK
queries are the positive class.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .calibration import (
    Calibration,
    critical_value_from_sample,
    p_values_from_sample,
    score_queries,
)
from .errors import EmptySample, ValidationError
from .vecstore import CorpusIndex


class PoolTooSmall(ValidationError):
    pass


@dataclass(frozen=True)
class LabeledScores:
    ook_scores: np.ndarray
    ik_scores: np.ndarray

    def __post_init__(self):
        for name in ("ook_scores", "ik_scores"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if a.shape[0] == 0:
                raise EmptySample(f"{name} is empty")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, a)

    def swapped(self) -> "LabeledScores":
        return LabeledScores(self.ik_scores, self.ook_scores)


def auroc(scores: LabeledScores) -> float:
    """P(random OoK score > random IK score), ties counting one half (rank-sum form)."""
    pos, neg = scores.ook_scores, scores.ik_scores
    n_pos, n_neg = pos.shape[0], neg.shape[0]
    ranks = _kernels.average_ranks(np.concatenate((pos, neg)))
    rank_sum = float(ranks[:n_pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores: LabeledScores) -> float:
    """Average precision with tied scores handled as one block."""
    pos, neg = scores.ook_scores, scores.ik_scores
    s = np.concatenate((pos, neg))
    y = np.concatenate((np.ones(pos.shape[0]), np.zeros(neg.shape[0])))
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each tie block
    block_end = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.shape[0] - 1]
    tp = np.cumsum(y)[block_end]
    seen = block_end + 1.0
    precision = tp / seen
    new_pos = np.diff(np.r_[0.0, tp])
    return float((new_pos * precision).sum() / pos.shape[0])


def tpr_at_fpr(scores: LabeledScores, fpr: float = 0.05) -> tuple[float, float]:
    """Recall on OoK scores when IK scores are the null sample at level ``fpr``.

    An OoK score counts as detected when its p-value against the IK scores'
    smoothed eCDF is <= fpr. Returns ``(tpr, threshold)`` where threshold is
    the matching critical value.
    """
    ik = np.sort(scores.ik_scores)
    threshold = critical_value_from_sample(ik, fpr)
    p = p_values_from_sample(ik, scores.ook_scores)
    return float(np.mean(p <= fpr)), threshold


def roc_points(ook_scores, ik_scores) -> list[tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` at every distinct score, from ``(0, 0, inf)`` to ``(1, 1, min)``.

    A query counts as flagged when its score is >= threshold.
    """
    pos = np.asarray(ook_scores, dtype=np.float64)
    neg = np.asarray(ik_scores, dtype=np.float64)
    thresholds = np.unique(np.concatenate((pos, neg)))[::-1]
    ps, ns = np.sort(pos), np.sort(neg)
    tp = pos.shape[0] - np.searchsorted(ps, thresholds, side="left")
    fp = neg.shape[0] - np.searchsorted(ns, thresholds, side="left")
    pts = [(0.0, 0.0, float("inf"))]
    pts += [(fp[i] / neg.shape[0], tp[i] / pos.shape[0], float(t)) for i, t in enumerate(thresholds)]
    return pts


def _rejections(scores: LabeledScores, fpr: float, threshold: float | None):
    if threshold is not None:
        return scores.ik_scores >= threshold, scores.ook_scores >= threshold
    ik = np.sort(scores.ik_scores)
    return (
        p_values_from_sample(ik, scores.ik_scores) <= fpr,
        p_values_from_sample(ik, scores.ook_scores) <= fpr,
    )


def detection_error_rate(scores: LabeledScores, threshold: float | None = None, fpr: float = 0.05) -> float:
    """Misclassified fraction: rejected IK plus accepted OoK, over all queries.

    By default queries are rejected by the same p <= fpr rule as
    :func:`tpr_at_fpr`. Passing ``threshold`` switches to ``score >= threshold``.
    """
    ik_rej, ook_rej = _rejections(scores, fpr, threshold)
    wrong = int(ik_rej.sum()) + int((~ook_rej).sum())
    return wrong / (ik_rej.shape[0] + ook_rej.shape[0])


def realized_fpr(scores: LabeledScores, fpr: float = 0.05) -> float:
    ik_rej, _ = _rejections(scores, fpr, None)
    return float(ik_rej.mean())


@dataclass(frozen=True)
class RunMetrics:
    auroc: float
    auprc: float
    tpr: float
    der: float
    threshold: float
    fpr_realized: float


def evaluate_scores(scores: LabeledScores, fpr: float = 0.05) -> RunMetrics:
    tpr, thr = tpr_at_fpr(scores, fpr)
    return RunMetrics(
        auroc=auroc(scores),
        auprc=auprc(scores),
        tpr=tpr,
        der=detection_error_rate(scores, fpr=fpr),
        threshold=thr,
        fpr_realized=realized_fpr(scores, fpr),
    )


_CSV_FIELDS = ("run", "auroc", "auprc", "tpr", "der", "threshold", "fpr_realized")


@dataclass(frozen=True)
class EvalReport:
    runs: list
    fpr: float = 0.05
    n_per_class: int = 0
    with_replacement: bool = False
    kind: str = ""
    mean: RunMetrics = field(init=False)

    def __post_init__(self):
        cols = {
            name: float(np.mean([getattr(r, name) for r in self.runs])) for name in RunMetrics.__dataclass_fields__
        }
        object.__setattr__(self, "mean", RunMetrics(**cols))

    @property
    def auroc(self):
        return self.mean.auroc

    @property
    def auprc(self):
        return self.mean.auprc

    @property
    def tpr_at_fpr(self):
        return self.mean.tpr

    @property
    def der(self):
        return self.mean.der

    @property
    def threshold(self):
        return self.mean.threshold

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "fpr": self.fpr,
            "n_per_class": self.n_per_class,
            "with_replacement": self.with_replacement,
            "mean": asdict(self.mean),
            "runs": [asdict(r) for r in self.runs],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_CSV_FIELDS)
        for i, r in enumerate(self.runs):
            w.writerow([i] + [repr(getattr(r, f)) for f in _CSV_FIELDS[1:]])
        w.writerow(["mean"] + [repr(getattr(self.mean, f)) for f in _CSV_FIELDS[1:]])
        return buf.getvalue()


def balanced_eval_scores(
    ik_stats,
    ook_stats,
    n_per_class: int = 300,
    runs: int = 10,
    seed: int = 0,
    fpr: float = 0.05,
    allow_replacement: bool = True,
    kind: str = "",
) -> EvalReport:
    """Repeated balanced draws from precomputed IK / OoK statistic pools."""
    ik = np.asarray(ik_stats, dtype=np.float64).reshape(-1)
    ook = np.asarray(ook_stats, dtype=np.float64).reshape(-1)
    if ik.shape[0] == 0 or ook.shape[0] == 0:
        raise EmptySample("evaluation pools must be non-empty")
    replace = min(ik.shape[0], ook.shape[0]) < n_per_class
    if replace and not allow_replacement:
        raise PoolTooSmall(
            f"pools hold {ik.shape[0]} IK / {ook.shape[0]} OoK queries, fewer than n_per_class={n_per_class}"
        )
    results = []
    for r in range(runs):
        rng = np.random.default_rng([seed, r])
        ik_idx = rng.choice(ik.shape[0], n_per_class, replace=ik.shape[0] < n_per_class)
        ook_idx = rng.choice(ook.shape[0], n_per_class, replace=ook.shape[0] < n_per_class)
        results.append(evaluate_scores(LabeledScores(ook[ook_idx], ik[ik_idx]), fpr))
    return EvalReport(results, fpr=fpr, n_per_class=n_per_class, with_replacement=replace, kind=kind)


def balanced_eval(
    index: CorpusIndex,
    cal: Calibration,
    ik_pool,
    ook_pool,
    n_per_class: int = 300,
    runs: int = 10,
    seed: int = 0,
    fpr: float = 0.05,
    allow_replacement: bool = True,
) -> EvalReport:
    """Score both embedding pools with the calibrated statistic, then run :func:`balanced_eval_scores`."""
    ik = np.asarray(ik_pool, dtype=np.float64)
    ook = np.asarray(ook_pool, dtype=np.float64)
    if ik.size == 0 or ook.size == 0:
        raise EmptySample("evaluation pools must be non-empty")
    ik_stats, _ = score_queries(cal, index, ik)
    ook_stats, _ = score_queries(cal, index, ook, check=False)
    return balanced_eval_scores(
        ik_stats, ook_stats, n_per_class, runs, seed, fpr, allow_replacement, kind=cal.kind.label()
    )
