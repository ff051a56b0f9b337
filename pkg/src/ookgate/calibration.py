"""Empirical null model, p-values, and the online per-query gate.

The null model is the +1-smoothed empirical CDF of the statistic over a set of
in-knowledge (or synthetic) calibration queries::

    F(t) = (1 + #{t_i <= t}) / (1 + n)        p(t) = 1 - F(t) = (n - #{t_i <= t}) / (1 + n)

A query is rejected (flagged out-of-knowledge) when ``p <= alpha``. The
p-value can be exactly 0 when the statistic exceeds every calibration value.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    EmptyCalibrationSet,
    EmptySample,
    InvalidAlpha,
    InvalidPValue,
    InvariantViolation,
    NeighborListTooShort,
    UnsupportedVersion,
)
from .statistics import StatisticKind, score_rows
from .vecstore import CorpusIndex, NeighborList, SimilarityMetric, knn_search_batch

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"


class Provenance(str, enum.Enum):
    TRUE_IN_KNOWLEDGE = "true_in_knowledge"
    SYNTHETIC = "synthetic"


class CorpusMismatchWarning(UserWarning):
    """Calibration was built against a different corpus than the one being queried."""


def _check_alpha(alpha):
    if not (0.0 < alpha < 1.0):
        raise InvalidAlpha(f"alpha must lie in (0, 1), got {alpha}")


# ---------------------------------------------------------------------------
# eCDF primitives
# ---------------------------------------------------------------------------


def ecdf_eval(sorted_samples, t) -> float:
    """Smoothed eCDF ``(1 + #{x <= t}) / (1 + n)`` of an ascending sample."""
    s = np.asarray(sorted_samples, dtype=np.float64)
    n = s.shape[0]
    if n == 0:
        raise EmptySample("eCDF of an empty sample")
    if not math.isfinite(t):
        raise ValueError(f"probe must be finite, got {t}")
    c = int(np.searchsorted(s, t, side="right"))
    return (1 + c) / (1 + n)


def _p_from_counts(counts, n):
    # same value as 1 - (1 + c) / (1 + n), computed without the cancellation
    return (n - np.asarray(counts, dtype=np.float64)) / (n + 1)


def p_values_from_sample(sorted_samples, ts) -> np.ndarray:
    s = np.asarray(sorted_samples, dtype=np.float64)
    if s.shape[0] == 0:
        raise EmptySample("p-value against an empty sample")
    counts = _kernels.count_le(s, np.atleast_1d(np.asarray(ts, dtype=np.float64)))
    return _p_from_counts(counts, s.shape[0])


def critical_value_from_sample(sorted_samples, alpha: float) -> float:
    """``inf{t : F(t) > 1 - alpha}`` over an ascending sample.

    Evaluated as the smallest sample value whose p-value is strictly below
    alpha; the largest sample always qualifies (its p-value is 0).
    """
    _check_alpha(alpha)
    s = np.asarray(sorted_samples, dtype=np.float64)
    n = s.shape[0]
    if n == 0:
        raise EmptySample("critical value of an empty sample")
    p = _p_from_counts(np.searchsorted(s, s, side="right"), n)
    j = int(np.argmax(p < alpha))
    return float(s[j])


# ---------------------------------------------------------------------------
# meta-analytic combination
# ---------------------------------------------------------------------------


def _check_p(p):
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise EmptySample("no p-values to combine")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise InvalidPValue("p-values must lie in [0, 1]")
    return p


def _fisher_rows(P, mode="literal", eps=None):
    if mode == "literal":
        return -2.0 * P.sum(axis=1)
    floor = np.finfo(np.float64).tiny if eps is None else eps
    return -2.0 * np.log(np.maximum(P, floor)).sum(axis=1)


def _simes_rows(P):
    k = P.shape[1]
    Ps = np.sort(P, axis=1)
    return (k * Ps / np.arange(1, k + 1)).min(axis=1)


def fisher_combine(p_values, mode: str = "literal", eps: float | None = None) -> float:
    """Fisher-style combination of per-rank p-values.

    ``mode="literal"`` returns ``-2 * sum(p)``; ``mode="log"`` returns the
    textbook ``-2 * sum(log(max(p, eps)))``. Larger means more significant in
    both modes.
    """
    p = _check_p(p_values)
    return float(_fisher_rows(p.reshape(1, -1), mode, eps)[0])


def simes_combine(p_values) -> float:
    """Simes global p-value ``min_i k * p_(i) / i``."""
    p = _check_p(p_values)
    return float(_simes_rows(p.reshape(1, -1))[0])


# ---------------------------------------------------------------------------
# calibration object
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Calibration:
    """Empirical null model for one statistic over one corpus.

    ``rank_pools[i]`` holds the ascending values of ``-s_{i+1}`` (negated
    (i+1)-th neighbour similarity) over all calibration queries; the meta
    statistics test each rank against its pool. ``kind.k`` is the effective
    depth, already capped at the corpus size.
    """

    kind: StatisticKind
    metric: SimilarityMetric
    dim: int
    sorted_stats: np.ndarray
    rank_pools: np.ndarray
    provenance: Provenance
    corpus_fingerprint: str

    @property
    def n_cal(self) -> int:
        return int(self.sorted_stats.shape[0])

    @property
    def k(self) -> int:
        return self.kind.k

    def __eq__(self, other):
        if not isinstance(other, Calibration):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.metric == other.metric
            and self.dim == other.dim
            and self.provenance == other.provenance
            and self.corpus_fingerprint == other.corpus_fingerprint
            and self.sorted_stats.tobytes() == other.sorted_stats.tobytes()
            and self.rank_pools.shape == other.rank_pools.shape
            and self.rank_pools.tobytes() == other.rank_pools.tobytes()
        )

    __hash__ = None


def _freeze(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _rank_p_values(rank_pools, neg_sims):
    n = rank_pools.shape[1]
    counts = _kernels.count_le_rows(rank_pools, neg_sims)
    return _p_from_counts(counts, n)


def _meta_scores(kind, rank_pools, sims):
    """Meta statistic for each row of ``sims``: fisher value, or negated simes p."""
    P = _rank_p_values(rank_pools, -sims[:, : kind.k])
    if kind.kind == "fisher":
        return _fisher_rows(P, kind.fisher_mode, 1.0 / (1 + rank_pools.shape[1]))
    return -_simes_rows(P)


def build_calibration(
    index: CorpusIndex,
    cal_queries,
    kind: StatisticKind,
    provenance=Provenance.TRUE_IN_KNOWLEDGE,
) -> Calibration:
    Q = np.asarray(cal_queries, dtype=np.float64)
    if Q.size == 0 or Q.shape[0] == 0:
        raise EmptyCalibrationSet("no calibration queries")
    if Q.ndim != 2:
        raise DimensionMismatch(f"calibration queries must be a 2-d array, got shape {Q.shape}")
    eff = kind.truncated(index.n)
    if eff is not kind:
        log.info("corpus has %d documents; k reduced from %d to %d", index.n, kind.k, eff.k)
    _, sims = knn_search_batch(index, Q, eff.k)
    rank_pools = np.sort((-sims).T, axis=1)
    if eff.is_meta:
        stats = _meta_scores(eff, rank_pools, sims)
    else:
        stats = score_rows(eff, sims)
    return Calibration(
        kind=eff,
        metric=index.metric,
        dim=index.dim,
        sorted_stats=_freeze(np.sort(stats)),
        rank_pools=_freeze(rank_pools),
        provenance=Provenance(provenance),
        corpus_fingerprint=index.fingerprint(),
    )


def p_value(cal: Calibration, t: float) -> float:
    """``1 - F(t)`` against the calibration statistics."""
    if not math.isfinite(t):
        raise ValueError(f"statistic must be finite, got {t}")
    return float(p_values_from_sample(cal.sorted_stats, [t])[0])


def critical_value(cal: Calibration, alpha: float) -> float:
    return critical_value_from_sample(cal.sorted_stats, alpha)


def per_rank_p_values(cal: Calibration, nb) -> np.ndarray:
    """One p-value per neighbour rank, each against that rank's null pool."""
    sims = nb.similarities if isinstance(nb, NeighborList) else np.asarray(nb, dtype=np.float64)
    sims = np.asarray(sims, dtype=np.float64).reshape(1, -1)
    if sims.shape[1] < cal.k:
        raise NeighborListTooShort(f"need {cal.k} neighbours, got {sims.shape[1]}")
    return _rank_p_values(cal.rank_pools, -sims[:, : cal.k])[0]


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateDecision:
    statistic: float
    p_value: float
    alpha: float
    reject: bool
    kind: StatisticKind

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "alpha": self.alpha, "reject": self.reject}


def _check_compatible(cal: Calibration, index: CorpusIndex):
    if cal.dim != index.dim:
        raise DimensionMismatch(f"calibration dimension {cal.dim} does not match index dimension {index.dim}")
    if cal.corpus_fingerprint != index.fingerprint():
        warnings.warn(
            "calibration was built against a different corpus (fingerprint mismatch)",
            CorpusMismatchWarning,
            stacklevel=3,
        )


def score_queries(cal: Calibration, index: CorpusIndex, queries, check=True):
    """Statistics and p-values for a batch of query embeddings.

    Returns ``(statistics, p_values)``. For ``simes`` the p-value is the Simes
    combination itself and the statistic is its negation.
    """
    if check:
        _check_compatible(cal, index)
    _, sims = knn_search_batch(index, queries, cal.k)
    if sims.shape[1] < cal.k:
        raise NeighborListTooShort(f"index returned {sims.shape[1]} neighbours, calibration needs {cal.k}")
    kind = cal.kind
    if kind.kind == "simes":
        stats = _meta_scores(kind, cal.rank_pools, sims)
        return stats, -stats
    if kind.kind == "fisher":
        stats = _meta_scores(kind, cal.rank_pools, sims)
    else:
        stats = score_rows(kind, sims)
    return stats, p_values_from_sample(cal.sorted_stats, stats)


def gate_batch(cal: Calibration, index: CorpusIndex, queries, alpha: float = 0.05) -> list[GateDecision]:
    _check_alpha(alpha)
    stats, ps = score_queries(cal, index, queries)
    return [
        GateDecision(float(t), float(p), float(alpha), bool(p <= alpha), cal.kind)
        for t, p in zip(stats.tolist(), ps.tolist())
    ]


def gate_query(cal: Calibration, index: CorpusIndex, query, alpha: float = 0.05) -> GateDecision:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise DimensionMismatch("gate_query takes one 1-d query; use gate_batch for several")
    return gate_batch(cal, index, q[None, :], alpha)[0]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _payload(cal: Calibration) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": cal.kind.kind,
        "k": cal.kind.k,
        "rank_j": cal.kind.rank_j,
        "tau": cal.kind.tau,
        "fisher_mode": cal.kind.fisher_mode,
        "metric": cal.metric.value,
        "dim": cal.dim,
        "n_cal": cal.n_cal,
        "provenance": cal.provenance.value,
        "corpus_fingerprint": cal.corpus_fingerprint,
        "sorted_stats": cal.sorted_stats.tolist(),
        "rank_pools": cal.rank_pools.tolist(),
    }


def _checksum(payload: dict) -> str:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def dumps_calibration(cal: Calibration) -> str:
    payload = _payload(cal)
    payload["checksum"] = _checksum(payload)
    # floats go through repr(), the shortest string that round-trips exactly
    return json.dumps(payload, allow_nan=False) + "\n"


def save_calibration(cal: Calibration, path) -> None:
    Path(path).write_text(dumps_calibration(cal), encoding="utf-8")


def loads_calibration(text: str) -> Calibration:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvariantViolation(f"calibration file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvariantViolation("calibration file must hold a JSON object")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported calibration version {version!r} (expected {FORMAT_VERSION!r})")
    checksum = doc.pop("checksum", None)
    try:
        kind = StatisticKind(
            kind=doc["kind"],
            k=doc["k"],
            rank_j=doc["rank_j"],
            tau=doc["tau"],
            fisher_mode=doc.get("fisher_mode", "literal"),
        )
        stats = np.asarray(doc["sorted_stats"], dtype=np.float64)
        pools = np.asarray(doc["rank_pools"], dtype=np.float64)
        n_cal = int(doc["n_cal"])
        cal = Calibration(
            kind=kind,
            metric=SimilarityMetric.parse(doc["metric"]),
            dim=int(doc["dim"]),
            sorted_stats=_freeze(stats),
            rank_pools=_freeze(pools),
            provenance=Provenance(doc["provenance"]),
            corpus_fingerprint=str(doc["corpus_fingerprint"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvariantViolation(f"malformed calibration file: {exc}") from exc
    if n_cal < 1 or stats.ndim != 1 or stats.shape[0] != n_cal:
        raise InvariantViolation(f"sorted_stats has {stats.shape} entries, n_cal={n_cal}")
    if pools.ndim != 2 or pools.shape != (kind.k, n_cal):
        raise InvariantViolation(f"rank_pools shape {pools.shape} != ({kind.k}, {n_cal})")
    if not (np.all(np.isfinite(stats)) and np.all(np.isfinite(pools))):
        raise InvariantViolation("non-finite values in calibration file")
    if np.any(np.diff(stats) < 0) or np.any(np.diff(pools, axis=1) < 0):
        raise InvariantViolation("calibration samples are not sorted ascending")
    if checksum is None or checksum != _checksum(doc):
        raise ChecksumMismatch("calibration file checksum does not match its contents")
    return cal


def load_calibration(path) -> Calibration:
    return loads_calibration(Path(path).read_text(encoding="utf-8"))
