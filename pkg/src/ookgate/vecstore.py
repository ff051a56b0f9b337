"""Flat exact k-nearest-neighbour store over corpus-chunk embeddings."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import (
    DimensionMismatch,
    DuplicateId,
    EmptyCorpus,
    InvalidK,
    NonFiniteInput,
    RaggedDimensions,
    ZeroVector,
)


class SimilarityMetric(str, enum.Enum):
    COSINE = "cosine"
    DOT = "dot"

    @classmethod
    def parse(cls, value) -> "SimilarityMetric":
        if isinstance(value, cls):
            return value
        token = str(value).strip().lower()
        if token in ("dot", "dotproduct", "dot_product", "ip"):
            return cls.DOT
        if token in ("cos", "cosine"):
            return cls.COSINE
        raise ValueError(f"unknown similarity metric {value!r}")


def _as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("vector contains NaN or infinite entries")
    return v


def similarity(a, b, metric=SimilarityMetric.COSINE) -> float:
    """Similarity of two embeddings under ``metric`` (computed in float64)."""
    metric = SimilarityMetric.parse(metric)
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"length {a.shape[0]} vs {b.shape[0]}")
    dot = float(np.dot(a, b))
    if metric is SimilarityMetric.DOT:
        return dot
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("zero vector has no cosine similarity")
    return dot / (na * nb)


@dataclass(frozen=True)
class NeighborList:
    """Top-k retrieval result, best first."""

    doc_ids: tuple
    similarities: np.ndarray
    k_requested: int

    def __len__(self):
        return len(self.doc_ids)

    @property
    def entries(self):
        return list(zip(self.doc_ids, self.similarities.tolist()))

    @classmethod
    def from_similarities(cls, sims, doc_ids=None, k_requested=None) -> "NeighborList":
        """Wrap a descending similarity list (mostly for tests and ad-hoc scoring)."""
        s = np.asarray(sims, dtype=np.float64).reshape(-1)
        if doc_ids is None:
            doc_ids = tuple(f"d{i}" for i in range(s.shape[0]))
        s.setflags(write=False)
        return cls(tuple(doc_ids), s, int(k_requested or max(len(s), 1)))


@dataclass(frozen=True, eq=False)
class CorpusIndex:
    """Immutable n x d embedding matrix plus ids. Build it with :func:`build_index`."""

    metric: SimilarityMetric
    rows: np.ndarray
    doc_ids: tuple
    texts: tuple | None = None
    _unit_rows: np.ndarray = field(repr=False, default=None)
    _id_rank: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    @property
    def n(self) -> int:
        return int(self.rows.shape[0])

    def __len__(self):
        return self.n

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"dim={self.dim};metric={self.metric.value};n={self.n}\n".encode())
        for doc_id in self.doc_ids:
            h.update(doc_id.encode("utf-8"))
            h.update(b"\x00")
        h.update(np.ascontiguousarray(self.rows, dtype="<f8").tobytes())
        return h.hexdigest()

    def similarities(self, queries) -> np.ndarray:
        """Full (q, n) similarity matrix for a batch of queries."""
        Q = _check_queries(queries, self.dim, self.metric)
        if self.metric is SimilarityMetric.COSINE:
            Q = Q / np.linalg.norm(Q, axis=1, keepdims=True)
            M = self._unit_rows
        else:
            M = self.rows
        # one matrix-vector product per query: a query's similarities must not
        # depend on which batch it arrived in (gemm blocking changes rounding)
        out = np.empty((Q.shape[0], self.n), dtype=np.float64)
        for i in range(Q.shape[0]):
            np.dot(M, Q[i], out=out[i])
        return out


def _check_queries(queries, dim, metric) -> np.ndarray:
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.ndim != 2:
        raise DimensionMismatch(f"queries must be 1-d or 2-d, got shape {Q.shape}")
    if Q.shape[1] != dim:
        raise DimensionMismatch(f"query dimension {Q.shape[1]} does not match index dimension {dim}")
    if not np.all(np.isfinite(Q)):
        raise NonFiniteInput("query contains NaN or infinite entries")
    if metric is SimilarityMetric.COSINE and np.any(~Q.any(axis=1)):
        raise ZeroVector("zero query vector under cosine metric")
    return Q


def build_index(vectors, doc_ids: Sequence[str], metric=SimilarityMetric.COSINE, texts=None) -> CorpusIndex:
    metric = SimilarityMetric.parse(metric)
    doc_ids = tuple(str(d) for d in doc_ids)
    if len(doc_ids) == 0 or (not isinstance(vectors, np.ndarray) and len(vectors) == 0):
        raise EmptyCorpus("cannot build an index from zero vectors")
    if isinstance(vectors, np.ndarray):
        rows = np.array(vectors, dtype=np.float64, copy=True)
    else:
        lengths = {len(v) for v in vectors}
        if len(lengths) > 1:
            raise RaggedDimensions(f"vectors have differing lengths {sorted(lengths)}")
        rows = np.array([np.asarray(v, dtype=np.float64) for v in vectors])
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptyCorpus("expected a non-empty n x d matrix")
    if rows.shape[1] == 0:
        raise RaggedDimensions("embedding dimension must be positive")
    if rows.shape[0] != len(doc_ids):
        raise ValueError(f"{rows.shape[0]} vectors but {len(doc_ids)} ids")
    if len(set(doc_ids)) != len(doc_ids):
        seen, dup = set(), None
        for d in doc_ids:
            if d in seen:
                dup = d
                break
            seen.add(d)
        raise DuplicateId(f"duplicate document id {dup!r}")
    if not np.all(np.isfinite(rows)):
        raise NonFiniteInput("corpus embeddings contain NaN or infinite entries")
    unit = None
    if metric is SimilarityMetric.COSINE:
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        zero = np.flatnonzero(norms[:, 0] == 0.0)
        if zero.size:
            raise ZeroVector(f"zero vector for document {doc_ids[zero[0]]!r} under cosine metric")
        unit = rows / norms
        unit.setflags(write=False)
    if texts is not None:
        texts = tuple(texts)
        if len(texts) != len(doc_ids):
            raise ValueError("texts and doc_ids differ in length")
    rows.setflags(write=False)
    # position of each doc in ascending-id order, used for deterministic tie-breaks
    id_rank = np.empty(len(doc_ids), dtype=np.int64)
    id_rank[np.argsort(np.array(doc_ids, dtype=object), kind="stable")] = np.arange(len(doc_ids))
    id_rank.setflags(write=False)
    return CorpusIndex(metric, rows, doc_ids, texts, unit, id_rank)


def knn_search_batch(index: CorpusIndex, queries, k: int):
    """Top-k neighbours for many queries at once.

    Returns ``(indices, sims)``, both shaped (q, min(k, n)) and ordered best
    first with ties broken by ascending doc id.
    """
    if int(k) < 1:
        raise InvalidK(f"k must be >= 1, got {k}")
    k_eff = min(int(k), index.n)
    S = index.similarities(queries)
    idx = _kernels.topk_rows(S, index._id_rank, k_eff)
    sims = np.take_along_axis(S, idx, axis=1)
    return idx, sims


def knn_search(index: CorpusIndex, query, k: int) -> NeighborList:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise DimensionMismatch("knn_search takes a single 1-d query; use knn_search_batch")
    idx, sims = knn_search_batch(index, q, k)
    ids = tuple(index.doc_ids[i] for i in idx[0])
    s = sims[0].copy()
    s.setflags(write=False)
    return NeighborList(ids, s, int(k))
