"""Hot inner loops, with a numba path and a pure-numpy path.

The numba kernels are used when numba imports and ``OOKGATE_DISABLE_NUMBA``
is unset (or "0"). Both paths produce bit-identical results; the test suite
checks that, and ``benchmarks/bench_kernels.py`` times them against each other.

Public names in this module (``topk_rows``, ``count_le``, ...) are bound to the
selected backend at import time. ``numpy_impl`` and ``numba_impl`` expose both
sets explicitly.
"""

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _numba_disabled():
    return os.environ.get("OOKGATE_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _topk_rows_np(sims, id_rank, k):
    """Indices of the k best columns per row: similarity desc, then id_rank asc."""
    q, n = sims.shape
    ranks = np.broadcast_to(id_rank, (q, n))
    order = np.lexsort((ranks, -sims), axis=-1)
    return np.ascontiguousarray(order[:, :k]).astype(np.int64)


def _count_le_np(sorted_samples, probes):
    return np.searchsorted(sorted_samples, probes, side="right").astype(np.int64)


def _count_le_rows_np(sorted_pools, values):
    # sorted_pools: (k, n) each row ascending; values: (q, k)
    out = np.empty(values.shape, dtype=np.int64)
    for r in range(sorted_pools.shape[0]):
        out[:, r] = np.searchsorted(sorted_pools[r], values[:, r], side="right")
    return out


def _ks_sup_np(a, b):
    n, m = a.shape[0], b.shape[0]
    best = abs(1.0 / (n + 1) - 1.0 / (m + 1))
    points = np.unique(np.concatenate((a, b)))
    ca = np.searchsorted(a, points, side="right")
    cb = np.searchsorted(b, points, side="right")
    diff = np.abs((1 + ca) / (n + 1) - (1 + cb) / (m + 1))
    if diff.size:
        best = max(best, float(diff.max()))
    return best


def _average_ranks_np(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(n, dtype=np.float64)
    # boundaries of tie blocks in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    block_rank = (starts + 1 + ends) / 2.0
    ranks[order] = np.repeat(block_rank, ends - starts)
    return ranks


numpy_impl = SimpleNamespace(
    name="numpy",
    topk_rows=_topk_rows_np,
    count_le=_count_le_np,
    count_le_rows=_count_le_rows_np,
    ks_sup=_ks_sup_np,
    average_ranks=_average_ranks_np,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


def _build_numba_impl():
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def _upper_bound(arr, t):
        lo = 0
        hi = arr.shape[0]
        while lo < hi:
            mid = (lo + hi) >> 1
            if arr[mid] <= t:
                lo = mid + 1
            else:
                hi = mid
        return lo

    @njit
    def topk_rows(sims, id_rank, k):
        q, n = sims.shape
        out = np.empty((q, k), dtype=np.int64)
        buf = np.empty(k, dtype=np.int64)
        for r in range(q):
            row = sims[r]
            filled = 0
            for i in range(n):
                s = row[i]
                if filled == k:
                    last = buf[k - 1]
                    if s < row[last] or (s == row[last] and id_rank[i] > id_rank[last]):
                        continue
                    pos = k - 1
                else:
                    pos = filled
                    filled += 1
                # shift worse entries right, insertion sort into buf[:filled]
                while pos > 0:
                    prev = buf[pos - 1]
                    if s > row[prev] or (s == row[prev] and id_rank[i] < id_rank[prev]):
                        buf[pos] = prev
                        pos -= 1
                    else:
                        break
                buf[pos] = i
            for j in range(k):
                out[r, j] = buf[j]
        return out

    @njit
    def count_le(sorted_samples, probes):
        out = np.empty(probes.shape[0], dtype=np.int64)
        for i in range(probes.shape[0]):
            out[i] = _upper_bound(sorted_samples, probes[i])
        return out

    @njit
    def count_le_rows(sorted_pools, values):
        q, k = values.shape
        out = np.empty((q, k), dtype=np.int64)
        for i in range(q):
            for r in range(k):
                out[i, r] = _upper_bound(sorted_pools[r], values[i, r])
        return out

    @njit
    def ks_sup(a, b):
        n = a.shape[0]
        m = b.shape[0]
        best = abs(1.0 / (n + 1) - 1.0 / (m + 1))
        i = 0
        j = 0
        while i < n or j < m:
            if j >= m or (i < n and a[i] <= b[j]):
                v = a[i]
            else:
                v = b[j]
            while i < n and a[i] <= v:
                i += 1
            while j < m and b[j] <= v:
                j += 1
            d = abs((1 + i) / (n + 1) - (1 + j) / (m + 1))
            if d > best:
                best = d
        return best

    @njit
    def average_ranks(x):
        n = x.shape[0]
        order = np.argsort(x, kind="mergesort")
        ranks = np.empty(n, dtype=np.float64)
        start = 0
        while start < n:
            end = start + 1
            while end < n and x[order[end]] == x[order[start]]:
                end += 1
            r = (start + 1 + end) / 2.0
            for t in range(start, end):
                ranks[order[t]] = r
            start = end
        return ranks

    return SimpleNamespace(
        name="numba",
        topk_rows=topk_rows,
        count_le=count_le,
        count_le_rows=count_le_rows,
        ks_sup=lambda a, b: float(ks_sup(a, b)),
        average_ranks=average_ranks,
    )


numba_impl = _build_numba_impl() if numba is not None else None

_active = numba_impl if (numba_impl is not None and not _numba_disabled()) else numpy_impl
BACKEND = _active.name


def topk_rows(sims, id_rank, k):
    return _active.topk_rows(
        np.ascontiguousarray(sims, dtype=np.float64), np.ascontiguousarray(id_rank, dtype=np.int64), int(k)
    )


def count_le(sorted_samples, probes):
    return _active.count_le(
        np.ascontiguousarray(sorted_samples, dtype=np.float64), np.ascontiguousarray(probes, dtype=np.float64)
    )


def count_le_rows(sorted_pools, values):
    return _active.count_le_rows(
        np.ascontiguousarray(sorted_pools, dtype=np.float64), np.ascontiguousarray(values, dtype=np.float64)
    )


def ks_sup(a_sorted, b_sorted):
    return _active.ks_sup(
        np.ascontiguousarray(a_sorted, dtype=np.float64), np.ascontiguousarray(b_sorted, dtype=np.float64)
    )


def average_ranks(x):
    return _active.average_ranks(np.ascontiguousarray(x, dtype=np.float64))
