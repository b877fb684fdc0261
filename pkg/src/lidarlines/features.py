"""Scale-invariant local point features.

For a point ``p`` with neighbors ``p_1..p_k`` the feature is the summed offset
vector divided by the summed offset lengths::

    f = sum_i (p - p_i) / sum_i ||p - p_i||

A similarity transform ``s R p + t`` scales numerator and denominator by ``s``,
so ``f`` rotates with ``R`` and is unaffected by ``s`` and ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import PointCloud

DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class FeatureConfig:
    k: int = 20

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


def si_features_from_neighbors(points: np.ndarray, neighbors: np.ndarray,
                               distances: Optional[np.ndarray] = None):
    """Features given a precomputed ``(N, k)`` neighbor table.

    ``distances``, when given, are the matching neighbor distances and save
    recomputing them.

    Returns:
        ``(features, degenerate)`` where ``degenerate`` flags points whose
        neighbor distances sum below ``1e-12``; those features are zero.
    """
    points = np.asarray(points, dtype=np.float64)
    diff = points[:, None, :] - np.take(points, neighbors, axis=0)
    num = np.einsum("ijk->ik", diff)
    if distances is None:
        distances = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    den = distances.sum(axis=1)
    degenerate = den < DEGENERATE_EPS
    f = np.zeros_like(num)
    ok = ~degenerate
    f[ok] = num[ok] / den[ok, None]
    return f, degenerate


def compute_si_features(cloud: PointCloud, cfg: FeatureConfig = FeatureConfig(),
                        return_degenerate: bool = False):
    """Per-point scale-invariant feature, shape ``(N, 3)``."""
    n = len(cloud)
    if n <= cfg.k:
        raise ValueError(f"need more than k={cfg.k} points, got {n}")
    neighbors, distances = cloud.index.knn_all(cfg.k, return_distance=True)
    f, degenerate = si_features_from_neighbors(cloud.points, neighbors, distances)
    return (f, degenerate) if return_degenerate else f
