"""Synthetic embedding clusters for experiments, benchmarks and demos.

A cluster is ``normalize(center + sigma * z)`` with ``z`` standard normal in
``dim`` dimensions. Cluster spread is measured by its RMS radius
``sigma * sqrt(dim)``, and separations between clusters are expressed in units
of that radius.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def draw_cluster(rng, center, sigma, n, normalize=True):
    center = np.asarray(center, dtype=np.float64)
    x = center + sigma * rng.standard_normal((n, center.shape[0]))
    return unit_rows(x) if normalize else x


@dataclass(frozen=True)
class ClusterPair:
    """An in-knowledge cluster A and an out-of-knowledge cluster B."""

    center_a: np.ndarray
    center_b: np.ndarray
    sigma: float

    @property
    def dim(self):
        return self.center_a.shape[0]

    @property
    def radius(self):
        return self.sigma * np.sqrt(self.dim)

    def draw_a(self, rng, n):
        return draw_cluster(rng, self.center_a, self.sigma, n)

    def draw_b(self, rng, n):
        return draw_cluster(rng, self.center_b, self.sigma, n)


def make_cluster_pair(rng, dim=64, sigma=0.2, separation=4.0) -> ClusterPair:
    """Unit-norm center A, and B offset orthogonally by ``separation`` RMS radii."""
    a = rng.standard_normal(dim)
    a /= np.linalg.norm(a)
    u = rng.standard_normal(dim)
    u -= (u @ a) * a
    u /= np.linalg.norm(u)
    b = a + separation * sigma * np.sqrt(dim) * u
    return ClusterPair(a, b, float(sigma))
