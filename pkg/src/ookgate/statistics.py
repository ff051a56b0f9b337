"""Test statistics over a query's retrieved neighbours.

Every statistic is oriented so that a larger value is stronger evidence that
the query is out of knowledge. The scalar ``score_*`` functions and the batched
:func:`score_rows` share one code path, so calibration (batched) and gating
(single query) can never disagree.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    EmptyNeighborList,
    InvalidParameter,
    MetaKindRequiresCalibration,
    RankOutOfRange,
)
from .vecstore import NeighborList

UNIVARIATE = ("mss", "knn", "avgknn", "entropy", "energy")
META = ("fisher", "simes")
KINDS = UNIVARIATE + META
FISHER_MODES = ("literal", "log")

DEFAULT_K = 32

_ALIASES = {
    "maxsim": "mss",
    "avg_knn": "avgknn",
    "avg-knn": "avgknn",
    "kth": "knn",
}


@dataclass(frozen=True)
class StatisticKind:
    """Which statistic to compute, plus its parameters.

    ``rank_j`` only matters for ``knn`` (defaults to ``k``), ``tau`` only for
    ``energy``, and ``fisher_mode`` only for ``fisher``: ``"literal"`` sums the
    per-rank p-values as ``-2 * sum(p)``, ``"log"`` is the classical
    ``-2 * sum(log p)`` with p floored at ``1 / (1 + n_cal)``.
    """

    kind: str = "energy"
    k: int = DEFAULT_K
    rank_j: int | None = None
    tau: float = 1.0
    fisher_mode: str = "literal"

    def __post_init__(self):
        token = _ALIASES.get(str(self.kind).strip().lower(), str(self.kind).strip().lower())
        object.__setattr__(self, "kind", token)
        if token not in KINDS:
            raise InvalidParameter(f"unknown statistic {self.kind!r}; expected one of {', '.join(KINDS)}")
        if int(self.k) < 1:
            raise InvalidParameter(f"k must be >= 1, got {self.k}")
        object.__setattr__(self, "k", int(self.k))
        rank_j = self.k if self.rank_j is None else int(self.rank_j)
        if not 1 <= rank_j <= self.k:
            raise InvalidParameter(f"rank_j must lie in [1, k={self.k}], got {rank_j}")
        object.__setattr__(self, "rank_j", rank_j)
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise InvalidParameter(f"tau must be positive, got {self.tau}")
        object.__setattr__(self, "tau", float(self.tau))
        if self.fisher_mode not in FISHER_MODES:
            raise InvalidParameter(f"fisher_mode must be one of {FISHER_MODES}, got {self.fisher_mode!r}")

    @property
    def is_meta(self) -> bool:
        return self.kind in META

    def truncated(self, n_docs: int) -> "StatisticKind":
        """Same statistic with k (and rank_j) capped at the corpus size."""
        if n_docs >= self.k:
            return self
        k = max(int(n_docs), 1)
        return replace(self, k=k, rank_j=min(self.rank_j, k))

    def label(self) -> str:
        if self.kind == "knn":
            return f"knn(k={self.k}, j={self.rank_j})"
        if self.kind == "energy":
            return f"energy(k={self.k}, tau={self.tau:g})"
        if self.kind == "fisher":
            return f"fisher(k={self.k}, {self.fisher_mode})"
        return f"{self.kind}(k={self.k})"


# ---------------------------------------------------------------------------
# row-wise kernels: sims is (q, k') sorted descending along axis 1
# ---------------------------------------------------------------------------


def _mss_rows(sims):
    return -sims[:, 0]


def _knn_rows(sims, j):
    return -sims[:, j - 1]


def _avg_rows(sims):
    return -sims.mean(axis=1)


def _entropy_rows(sims):
    z = sims - sims.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1, keepdims=True)
    p = e / total
    # H = log Z - sum p z, with z max-shifted
    return np.log(total[:, 0]) - (p * z).sum(axis=1)


def _energy_rows(sims, tau):
    top = sims.max(axis=1)
    lse = np.log(np.exp((sims - top[:, None]) / tau).sum(axis=1))
    return -(top + tau * lse)


def score_rows(kind: StatisticKind, sims) -> np.ndarray:
    """Univariate statistic for every row of a (q, k') descending similarity matrix.

    Rows longer than ``kind.k`` are truncated to their first ``k`` columns.
    """
    if kind.is_meta:
        raise MetaKindRequiresCalibration(f"{kind.kind} needs per-rank null pools; use calibration.score_queries")
    S = np.asarray(sims, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] == 0:
        raise EmptyNeighborList("no neighbours to score")
    if kind.kind == "knn":
        if S.shape[1] < kind.rank_j:
            raise RankOutOfRange(f"rank {kind.rank_j} requested but only {S.shape[1]} neighbours")
        return _knn_rows(S, kind.rank_j)
    S = S[:, : kind.k]
    if kind.kind == "mss":
        return _mss_rows(S)
    if kind.kind == "avgknn":
        return _avg_rows(S)
    if kind.kind == "entropy":
        return _entropy_rows(S)
    return _energy_rows(S, kind.tau)


def _row(nb) -> np.ndarray:
    sims = nb.similarities if isinstance(nb, NeighborList) else np.asarray(nb, dtype=np.float64)
    sims = np.asarray(sims, dtype=np.float64).reshape(1, -1)
    if sims.shape[1] == 0:
        raise EmptyNeighborList("no neighbours to score")
    return sims


def score_mss(nb) -> float:
    """Negated maximum similarity."""
    return float(_mss_rows(_row(nb))[0])


def score_knn_rank(nb, j: int) -> float:
    """Negated j-th largest similarity (1-based)."""
    sims = _row(nb)
    if j < 1 or sims.shape[1] < j:
        raise RankOutOfRange(f"rank {j} requested but only {sims.shape[1]} neighbours")
    return float(_knn_rows(sims, j)[0])


def score_avg_knn(nb, k: int = DEFAULT_K) -> float:
    return float(_avg_rows(_row(nb)[:, :k])[0])


def score_entropy(nb, k: int = DEFAULT_K) -> float:
    """Entropy (natural log) of the softmax over the top-k similarities."""
    return float(_entropy_rows(_row(nb)[:, :k])[0])


def score_energy(nb, k: int = DEFAULT_K, tau: float = 1.0) -> float:
    """``-tau * log(sum(exp(s / tau)))`` over the top-k similarities."""
    if not (np.isfinite(tau) and tau > 0):
        raise InvalidParameter(f"tau must be positive, got {tau}")
    return float(_energy_rows(_row(nb)[:, :k], float(tau))[0])


def compute_score(kind: StatisticKind, nb) -> float:
    if kind.is_meta:
        raise MetaKindRequiresCalibration(f"{kind.kind} needs per-rank null pools; use calibration.gate_query")
    if kind.kind == "mss":
        return score_mss(nb)
    if kind.kind == "knn":
        return score_knn_rank(nb, kind.rank_j)
    if kind.kind == "avgknn":
        return score_avg_knn(nb, kind.k)
    if kind.kind == "entropy":
        return score_entropy(nb, kind.k)
    return score_energy(nb, kind.k, kind.tau)
