"""Offline two-sample Kolmogorov-Smirnov drift test on calibrated statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .calibration import Calibration, _check_alpha, score_queries
from .errors import EmptySample, InvalidParameter
from .vecstore import CorpusIndex


@dataclass(frozen=True)
class DriftDecision:
    t_ks: float
    threshold: float
    alpha: float
    reject: bool
    p_asymptotic: float
    n: int
    m: int

    def to_dict(self) -> dict:
        return asdict(self)


def _sorted_sample(x, name):
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape[0] == 0:
        raise EmptySample(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return np.sort(a)


def ks_statistic(samples_a, samples_b) -> float:
    """Largest gap between the two samples' +1-smoothed eCDFs.

    Both step functions only move at sample values, so the supremum is taken
    over the region left of every sample and at each distinct sample value.
    """
    a = _sorted_sample(samples_a, "samples_a")
    b = _sorted_sample(samples_b, "samples_b")
    return _kernels.ks_sup(a, b)


def ks_threshold(alpha: float, n: int, m: int) -> float:
    """Two-sided rejection threshold ``sqrt(-ln(alpha/2) * (n + m) / (2 n m))``."""
    _check_alpha(alpha)
    if n < 1 or m < 1:
        raise InvalidParameter(f"sample sizes must be >= 1, got n={n}, m={m}")
    return math.sqrt(-math.log(alpha / 2.0) * (n + m) / (2.0 * n * m))


def ks_p_asymptotic(t_ks: float, n: int, m: int) -> float:
    """Kolmogorov tail ``Q(lam)`` at ``lam = t_ks * sqrt(n m / (n + m))``.

    No small-sample correction. The alternating series is summed until a term
    drops below 1e-12.
    """
    if not (0.0 <= t_ks <= 1.0):
        raise InvalidParameter(f"t_ks must lie in [0, 1], got {t_ks}")
    if n < 1 or m < 1:
        raise InvalidParameter(f"sample sizes must be >= 1, got n={n}, m={m}")
    lam = t_ks * math.sqrt(n * m / (n + m))
    return kolmogorov_tail(lam)


def kolmogorov_tail(lam: float) -> float:
    if lam <= 0.0:
        return 1.0
    total = 0.0
    j = 1
    while True:
        term = math.exp(-2.0 * j * j * lam * lam)
        total += term if j % 2 else -term
        if term < 1e-12 or j >= 1_000_000:
            break
        j += 1
    return min(1.0, max(0.0, 2.0 * total))


def drift_decision(stats_reference, stats_batch, alpha: float = 0.05) -> DriftDecision:
    """KS drift decision between two arrays of statistics."""
    a = _sorted_sample(stats_reference, "reference statistics")
    b = _sorted_sample(stats_batch, "batch statistics")
    n, m = a.shape[0], b.shape[0]
    t = _kernels.ks_sup(a, b)
    thr = ks_threshold(alpha, n, m)
    return DriftDecision(
        t_ks=t,
        threshold=thr,
        alpha=float(alpha),
        reject=bool(t > thr),
        p_asymptotic=ks_p_asymptotic(t, n, m),
        n=int(n),
        m=int(m),
    )


def drift_test(cal: Calibration, batch, index: CorpusIndex, alpha: float = 0.05) -> DriftDecision:
    """Score a batch of query embeddings and KS-test them against the calibration."""
    B = np.asarray(batch, dtype=np.float64)
    if B.size == 0:
        raise EmptySample("drift batch is empty")
    stats, _ = score_queries(cal, index, B)
    return drift_decision(cal.sorted_stats, stats, alpha)
