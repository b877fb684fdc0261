"""Automatic line labeling by geometric adaptation, region growth and line fitting.

A segmenter is anything with ``predict(points) -> (N,) uint8``. The trained
:class:`~lidarlines.net.MicroNet` qualifies, as does :class:`OracleSegmenter`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import PointCloud, SE3Transform, segment_distance
from .lines import LineSegment


class Segmenter(Protocol):
    def predict(self, points: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class AdaptationConfig:
    n_perturbations: int = 16
    xy_range: float = 20.0
    yaw_range_deg: float = 360.0
    vote_threshold: float = 0.8
    growth_radius: float = 0.5
    iterations: int = 3
    min_points: int = 5
    linearity_min: float = 10.0
    length_min: float = 0.5

    def __post_init__(self):
        if not 0 < self.vote_threshold <= 1:
            raise ValueError("vote_threshold must be in (0, 1]")
        if self.growth_radius <= 0:
            raise ValueError("growth_radius must be positive")
        if self.n_perturbations < 1:
            raise ValueError("n_perturbations must be at least 1")
        if self.iterations < 1 or self.min_points < 2:
            raise ValueError("iterations >= 1 and min_points >= 2 required")


@dataclass
class VoteMap:
    positive: np.ndarray
    total: np.ndarray

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=np.int64)
        self.total = np.asarray(self.total, dtype=np.int64)
        if self.positive.shape != self.total.shape:
            raise ValueError("vote arrays differ in shape")
        if np.any(self.positive < 0) or np.any(self.positive > self.total):
            raise ValueError("positive votes must lie in [0, total]")

    @classmethod
    def empty(cls, n: int) -> "VoteMap":
        return cls(np.zeros(n, np.int64), np.zeros(n, np.int64))

    @property
    def fraction(self) -> np.ndarray:
        return self.positive / np.maximum(self.total, 1)

    def add(self, prediction: np.ndarray) -> None:
        self.positive += np.asarray(prediction, dtype=np.int64) != 0
        self.total += 1


class OracleSegmenter:
    """Labels points by distance to known world-frame segments.

    Distances are to the finite segments (projections clamped to the
    endpoints), so clutter lying on a line's extension is not labeled.

    Because it works on the points it is given, the caller must hand it the
    transform that was applied (``set_frame``) so the lines move with the
    cloud; :func:`geometric_adaptation` does this automatically.
    """

    def __init__(self, lines: np.ndarray, threshold: float):
        self.lines = np.asarray(lines, dtype=np.float64).reshape(-1, 2, 3)
        self.threshold = threshold
        self.frame = SE3Transform.identity()

    def set_frame(self, xf: SE3Transform) -> None:
        self.frame = xf

    def predict(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        out = np.zeros(len(pts), dtype=bool)
        for e0, e1 in self.lines:
            e = self.frame.apply(np.stack([e0, e1]))
            out |= segment_distance(pts, e[0], e[1]) <= self.threshold
        return out.astype(np.uint8)


def sample_perturbation(rng: np.random.Generator, cfg: AdaptationConfig) -> SE3Transform:
    """Planar rigid motion: uniform yaw and uniform x/y offset."""
    half = np.radians(cfg.yaw_range_deg) / 2
    yaw = rng.uniform(-half, half)
    xy = rng.uniform(-cfg.xy_range, cfg.xy_range, size=2)
    return SE3Transform.from_yaw(yaw, (xy[0], xy[1], 0.0))


def geometric_adaptation(cloud: PointCloud, model: Segmenter,
                         cfg: AdaptationConfig = AdaptationConfig(), seed: int = 0,
                         transforms: Optional[Sequence[SE3Transform]] = None) -> VoteMap:
    """Vote line predictions over randomly perturbed copies of ``cloud``.

    ``transforms`` overrides the sampled perturbations (its length replaces
    ``n_perturbations``).
    """
    if transforms is None:
        rng = np.random.default_rng(seed)
        transforms = [sample_perturbation(rng, cfg) for _ in range(cfg.n_perturbations)]
    votes = VoteMap.empty(len(cloud))
    for xf in transforms:
        if hasattr(model, "set_frame"):
            model.set_frame(xf)
        votes.add(model.predict(xf.apply(cloud.points)))
    if hasattr(model, "set_frame"):
        model.set_frame(SE3Transform.identity())
    return votes


def threshold_candidates(votes: VoteMap, threshold: float) -> np.ndarray:
    """Boolean mask of points voted line strictly more than ``threshold``."""
    return votes.fraction > threshold


def region_grow(cloud: PointCloud, candidates: np.ndarray, growth_radius: float,
                min_points: int = 1) -> List[np.ndarray]:
    """Connected components of candidates linked within ``growth_radius``.

    Clusters smaller than ``min_points`` are dropped; the rest are returned
    as sorted index arrays ordered by their smallest member.
    """
    idx = np.flatnonzero(np.asarray(candidates, dtype=bool))
    if len(idx) == 0:
        return []
    pts = cloud.points[idx]
    pairs = cKDTree(pts).query_pairs(growth_radius, output_type="ndarray")
    n = len(idx)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(adj, directed=False)
    clusters = [idx[comp == c] for c in np.unique(comp)]
    clusters = [c for c in clusters if len(c) >= min_points]
    clusters.sort(key=lambda c: int(c[0]))
    return clusters


@dataclass(frozen=True)
class LineFit:
    """Outcome of :func:`fit_line`; ``segment`` is ``None`` on rejection."""

    segment: Optional[LineSegment]
    reason: str = ""
    linearity: float = 0.0


def fit_line(cloud: PointCloud, cluster: np.ndarray,
             cfg: AdaptationConfig = AdaptationConfig()) -> LineFit:
    """Total-least-squares segment through a cluster.

    The direction is the principal eigenvector of the member covariance,
    signed so its largest-magnitude component is positive; endpoints are the
    extreme member projections.
    """
    cluster = np.asarray(cluster, dtype=np.int64)
    if len(cluster) < cfg.min_points:
        return LineFit(None, "too few points")
    pts = cloud.points[cluster]
    centroid = pts.mean(axis=0)
    q = pts - centroid
    evals, evecs = np.linalg.eigh(q.T @ q / len(pts))
    l1, l2 = evals[2], evals[1]
    if l1 <= 1e-18:
        return LineFit(None, "coincident points")
    linearity = np.inf if l2 <= l1 * 1e-15 else l1 / l2
    if linearity < cfg.linearity_min:
        return LineFit(None, "not linear", float(linearity))
    u = evecs[:, 2]
    if u[np.argmax(np.abs(u))] < 0:
        u = -u
    t = q @ u
    e0, e1 = centroid + t.min() * u, centroid + t.max() * u
    if t.max() - t.min() < cfg.length_min:
        return LineFit(None, "too short", float(linearity))
    return LineFit(LineSegment(e0, e1, u, cluster), "", float(linearity))


def extract_segments(cloud: PointCloud, mask: np.ndarray,
                     cfg: AdaptationConfig = AdaptationConfig()):
    """Region-grow the masked points and fit a line to every cluster.

    Returns:
        ``(segments, rejected)`` where ``rejected`` holds ``(cluster, reason)``.
    """
    segments, rejected = [], []
    for cl in region_grow(cloud, mask, cfg.growth_radius, cfg.min_points):
        fit = fit_line(cloud, cl, cfg)
        if fit.segment is None:
            rejected.append((cl, fit.reason))
        else:
            segments.append(fit.segment)
    return segments, rejected


@dataclass
class LabelResult:
    cloud: PointCloud
    segments: List[LineSegment]
    votes: VoteMap
    rejected: List[Tuple[np.ndarray, str]] = field(default_factory=list)


def label_cloud(cloud: PointCloud, model: Segmenter, cfg: AdaptationConfig = AdaptationConfig(),
                seed: int = 0) -> LabelResult:
    """Votes, candidates, clusters and fitted lines for a single cloud."""
    votes = geometric_adaptation(cloud, model, cfg, seed)
    cand = threshold_candidates(votes, cfg.vote_threshold)
    segments, rejected = extract_segments(cloud, cand, cfg)
    labels = np.zeros(len(cloud), dtype=np.uint8)
    for seg in segments:
        labels[seg.member_indices] = 1
    return LabelResult(cloud.with_channels(labels=labels), segments, votes, rejected)


def auto_label_round(dataset: Sequence[PointCloud], model: Segmenter,
                     cfg: AdaptationConfig = AdaptationConfig(), seed: int = 0) -> List[LabelResult]:
    """Label every cloud; clouds use independent child seeds of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(dataset))
    return [label_cloud(c, model, cfg, int(s.generate_state(1)[0]))
            for c, s in zip(dataset, children)]
