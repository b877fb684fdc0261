"""Line segments, their mean descriptors, and cross-cloud line matching."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .geometry import PointCloud, SE3Transform, point_line_distance

MATCH_THRESHOLD = 0.1
CORRESPONDENCE_DISTANCE = 0.2


@dataclass(frozen=True)
class LineSegment:
    e0: np.ndarray
    e1: np.ndarray
    direction: np.ndarray
    member_indices: np.ndarray
    mean_descriptor: Optional[np.ndarray] = None

    def __post_init__(self):
        e0 = np.asarray(self.e0, dtype=np.float64)
        e1 = np.asarray(self.e1, dtype=np.float64)
        if np.linalg.norm(e1 - e0) <= 0:
            raise ValueError("segment endpoints coincide")
        u = np.asarray(self.direction, dtype=np.float64)
        u = u / np.linalg.norm(u)
        object.__setattr__(self, "e0", e0)
        object.__setattr__(self, "e1", e1)
        object.__setattr__(self, "direction", u)
        object.__setattr__(self, "member_indices", np.asarray(self.member_indices, dtype=np.int64))

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.e1 - self.e0))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.e0 + self.e1)

    def transformed(self, xf) -> "LineSegment":
        e = xf.apply(np.stack([self.e0, self.e1]))
        return replace(self, e0=e[0], e1=e[1], direction=xf.rotation @ self.direction)

    def to_dict(self) -> dict:
        out = {
            "e0": self.e0.tolist(),
            "e1": self.e1.tolist(),
            "direction": self.direction.tolist(),
            "members": self.member_indices.tolist(),
        }
        if self.mean_descriptor is not None:
            out["descriptor"] = np.asarray(self.mean_descriptor, dtype=np.float64).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LineSegment":
        desc = d.get("descriptor")
        return cls(np.array(d["e0"]), np.array(d["e1"]), np.array(d["direction"]),
                   np.array(d["members"], dtype=np.int64),
                   None if desc is None else np.array(desc))


@dataclass(frozen=True)
class LineMatch:
    source: int
    target: int
    distance: float


def describe_lines(cloud: PointCloud, segments: Sequence[LineSegment]) -> List[LineSegment]:
    """Attach the re-normalized mean of member point descriptors to each segment."""
    if cloud.descriptors is None:
        raise ValueError("cloud has no descriptors")
    out = []
    for seg in segments:
        if len(seg.member_indices) == 0:
            raise ValueError("segment has no member points")
        mean = cloud.descriptors[seg.member_indices].astype(np.float64).mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise ValueError("member descriptors cancel out")
        out.append(replace(seg, mean_descriptor=mean / norm))
    return out


def descriptor_distances(source: Sequence[LineSegment], target: Sequence[LineSegment]) -> np.ndarray:
    """Pairwise L1 distances between mean descriptors."""
    if not source or not target:
        return np.zeros((len(source), len(target)))
    a = np.stack([s.mean_descriptor for s in source])
    b = np.stack([t.mean_descriptor for t in target])
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)


def match_lines(source: Sequence[LineSegment], target: Sequence[LineSegment],
                match_threshold: float = MATCH_THRESHOLD) -> List[LineMatch]:
    """Mutual nearest neighbors in descriptor space within ``match_threshold`` (L1)."""
    if any(s.mean_descriptor is None for s in list(source) + list(target)):
        raise ValueError("all segments need mean descriptors")
    dist = descriptor_distances(source, target)
    if dist.size == 0:
        return []
    fwd = dist.argmin(axis=1)
    bwd = dist.argmin(axis=0)
    matches = []
    for i, j in enumerate(fwd):
        if bwd[j] == i and dist[i, j] <= match_threshold:
            matches.append(LineMatch(i, int(j), float(dist[i, j])))
    return matches


def mean_line_distance(points: np.ndarray, segment: LineSegment) -> float:
    return float(point_line_distance(points, segment.e0, segment.e1).mean())


def training_correspondences(cloud_a: PointCloud, segments_a: Sequence[LineSegment],
                             segments_b: Sequence[LineSegment], pose: SE3Transform,
                             max_distance: float = CORRESPONDENCE_DISTANCE):
    """Ground-truth line pairs for descriptor training.

    ``pose`` maps cloud A into cloud B's frame. A pair is eligible when the
    mean distance of A's transformed member points to B's line is at most
    ``max_distance``; pairs are then taken greedily by ascending distance so
    every line is used once.

    Returns:
        list of ``(i, i', mean_distance)`` sorted by ``i``.
    """
    cand = []
    for i, sa in enumerate(segments_a):
        pts = pose.apply(cloud_a.points[sa.member_indices])
        for j, sb in enumerate(segments_b):
            d = mean_line_distance(pts, sb)
            if d <= max_distance:
                cand.append((d, i, j))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for d, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j, d))
    return sorted(pairs)


def _rbf(value: float, lo: float, hi: float, bins: int) -> np.ndarray:
    centers = np.linspace(lo, hi, bins)
    sigma = (hi - lo) / (bins - 1)
    return np.exp(-0.5 * ((value - centers) / sigma) ** 2)


def geometric_line_descriptors(segments: Sequence[LineSegment], bins: int = 8) -> np.ndarray:
    """Hand-crafted line descriptors invariant to yaw and planar translation.

    Each line is summarized by its tilt from vertical, midpoint height, length
    and the distances to its two nearest neighboring line midpoints; every
    quantity is soft-binned with Gaussian kernels and the concatenation is
    L2-normalized. Used as a stand-in for learned descriptors.
    """
    mids = np.array([s.midpoint for s in segments]).reshape(-1, 3)
    out = []
    for i, s in enumerate(segments):
        others = np.delete(mids, i, axis=0)
        near = np.sort(np.linalg.norm(others - mids[i], axis=1))
        near = np.concatenate([near, np.full(2, 40.0)])[:2]
        parts = [
            _rbf(abs(s.direction[2]), 0.0, 1.0, bins),
            _rbf(mids[i, 2], -5.0, 10.0, bins),
            _rbf(s.length, 0.0, 10.0, bins),
            _rbf(near[0], 0.0, 30.0, bins),
            _rbf(near[1], 0.0, 30.0, bins),
        ]
        v = np.concatenate(parts)
        out.append(v / np.linalg.norm(v))
    return np.array(out).reshape(len(segments), 5 * bins)


def assign_line_descriptors(cloud: PointCloud, segments: Sequence[LineSegment],
                            line_desc: np.ndarray) -> PointCloud:
    """Give every member point its line's descriptor (others get the first axis)."""
    dim = line_desc.shape[1] if len(line_desc) else 1
    desc = np.zeros((len(cloud), dim))
    desc[:, 0] = 1.0
    for seg, v in zip(segments, line_desc):
        desc[seg.member_indices] = v
    return cloud.with_channels(descriptors=desc)
