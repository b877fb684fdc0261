"""Core geometry: point clouds, rigid/similarity transforms, neighbor search,
voxel downsampling and triangle-mesh sampling.

All coordinates are float64 meters. Point clouds are plain ``(N, 3)`` arrays
wrapped in :class:`PointCloud` together with their optional per-point channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9
DESCRIPTOR_NORM_TOL = 1e-6


def _check_rotation(rotation: np.ndarray) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
    if np.abs(rotation @ rotation.T - np.eye(3)).max() > ORTHO_TOL:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > ORTHO_TOL:
        raise ValueError("rotation has det != +1")
    return rotation


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about +z by ``yaw`` radians."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def exp_so3(rotvec: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()


@dataclass(frozen=True)
class SE3Transform:
    """Rigid transform ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SE3Transform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "SE3Transform":
        return cls(yaw_rotation(yaw), np.asarray(translation, dtype=np.float64))

    @property
    def scale(self) -> float:
        return 1.0

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "SE3Transform") -> "SE3Transform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return SE3Transform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SE3Transform":
        rt = self.rotation.T
        return SE3Transform(rt, -rt @ self.translation)

    def as_sim3(self) -> "Sim3Transform":
        return Sim3Transform(1.0, self.rotation, self.translation)


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform ``p -> s R p + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls()

    @classmethod
    def random(cls, rng: np.random.Generator, scale_range=(0.1, 3.0),
               translation_scale: float = 10.0) -> "Sim3Transform":
        s = rng.uniform(*scale_range)
        r = Rotation.random(random_state=rng).as_matrix()
        t = rng.uniform(-translation_scale, translation_scale, size=3)
        return cls(s, r, t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.rotation.T) + self.translation

    def compose(self, other: Union["Sim3Transform", SE3Transform]) -> "Sim3Transform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Sim3Transform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def inverse(self) -> "Sim3Transform":
        rt = self.rotation.T
        inv_s = 1.0 / self.scale
        return Sim3Transform(inv_s, rt, -inv_s * (rt @ self.translation))


Transform = Union[SE3Transform, Sim3Transform]


@dataclass(eq=False)
class PointCloud:
    """Ordered set of 3D points with optional per-point channels.

    Attributes:
        points: ``(N, 3)`` float64 coordinates.
        labels: optional ``(N,)`` uint8 line flags (1 = on a line).
        scores: optional ``(N,)`` values in [0, 1].
        descriptors: optional ``(N, d)`` unit-norm rows.
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    descriptors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self.points = pts
        n = len(pts)
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.uint8).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("labels length != number of points")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != n:
                raise ValueError("scores length != number of points")
            if np.any((self.scores < 0) | (self.scores > 1)):
                raise ValueError("scores must lie in [0, 1]")
        if self.descriptors is not None:
            desc = np.asarray(self.descriptors)
            if desc.ndim != 2 or len(desc) != n:
                raise ValueError("descriptors must be (N, d)")
            norms = np.linalg.norm(desc.astype(np.float64), axis=1)
            if n and np.max(np.abs(norms - 1.0)) > DESCRIPTOR_NORM_TOL:
                raise ValueError("descriptor rows must have unit L2 norm")
            self.descriptors = desc

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def index(self) -> "SpatialIndex":
        return SpatialIndex(self.points)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(self.points[idx], pick(self.labels), pick(self.scores),
                          pick(self.descriptors))

    def with_channels(self, **channels) -> "PointCloud":
        return replace(self, **channels)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size and np.any(self.face_areas() <= 0):
            raise ValueError("mesh has a zero-area face")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


class SpatialIndex:
    """KD-tree over a fixed point set with exact, deterministic queries.

    Neighbor lists exclude the query point itself. Distance ties are broken by
    ascending point index.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def _exact_knn(self, i: int, k: int) -> np.ndarray:
        p = self.points[i]
        d, _ = self.tree.query(p, k=k + 1)
        r = float(np.atleast_1d(d)[-1])
        cand = np.asarray(self.tree.query_ball_point(p, r * (1 + 1e-9) + 1e-12), dtype=np.int64)
        cand = cand[cand != i]
        d = self.points[cand] - p
        dist = np.sqrt((d * d).sum(axis=1))
        order = np.lexsort((cand, dist))
        return cand[order[:k]]

    def knn(self, i: int, k: int) -> np.ndarray:
        n = len(self.points)
        if not 1 <= k <= n - 1:
            raise ValueError(f"k must be in [1, N-1] = [1, {n - 1}], got {k}")
        return self._exact_knn(int(i), int(k))

    def knn_all(self, k: int, return_distance: bool = False):
        """``(N, k)`` neighbor table for every point (self excluded).

        With ``return_distance`` the matching ``(N, k)`` Euclidean distances
        are returned as well.
        """
        n = len(self.points)
        if not 1 <= k <= n - 1:
            raise ValueError(f"k must be in [1, N-1] = [1, {n - 1}], got {k}")
        m = min(k + 2, n)
        tree_d, idx = self.tree.query(self.points, k=m)
        # self sits in column 0 unless a duplicate point shares distance 0
        ok = idx[:, 0] == np.arange(n)
        idx, dist = idx[:, 1:], tree_d[:, 1:]
        # the tree's order can differ from the exact one only on near-ties
        step = np.diff(dist, axis=1)
        unsorted = ((step < 0) | ((step == 0) & (np.diff(idx, axis=1) < 0))).any(axis=1)
        for i in np.flatnonzero(unsorted & ok):
            order = np.lexsort((idx[i], dist[i]))
            idx[i], dist[i] = idx[i][order], dist[i][order]
        out, out_d = idx[:, :k].copy(), dist[:, :k].copy()
        # a row is trustworthy only when its k-th distance is strictly inside
        # the searched shell
        if m < n:
            ok &= dist[:, k - 1] < tree_d[:, -1] * (1 - 1e-9) - 1e-12
        for i in np.flatnonzero(~ok):
            out[i] = self._exact_knn(int(i), k)
            d = self.points[out[i]] - self.points[i]
            out_d[i] = np.sqrt((d * d).sum(axis=1))
        return (out, out_d) if return_distance else out

    def radius(self, i: int, radius: float) -> np.ndarray:
        if radius <= 0:
            raise ValueError("radius must be positive")
        p = self.points[i]
        cand = np.asarray(self.tree.query_ball_point(p, radius * (1 + 1e-9)), dtype=np.int64)
        cand = cand[cand != i]
        dist = np.linalg.norm(self.points[cand] - p, axis=1)
        return np.sort(cand[dist <= radius])


def knn_search(cloud: PointCloud, query_index: int, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest neighbors of ``query_index`` (self excluded)."""
    return cloud.index.knn(query_index, k)


def radius_search(cloud: PointCloud, query_index: int, radius: float) -> np.ndarray:
    """Indices within ``radius`` of the query point, ascending, self excluded."""
    return cloud.index.radius(query_index, radius)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the members of every occupied voxel by their centroid.

    Labels are aggregated by majority, scores by mean and descriptors by the
    re-normalized mean.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, first, inverse, counts = np.unique(keys, axis=0, return_index=True,
                                          return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    # Keep output in order of first appearance.
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    inverse = rank[inverse]
    counts = counts[order]
    m = len(counts)

    def mean_of(values):
        acc = np.zeros((m,) + values.shape[1:], dtype=np.float64)
        np.add.at(acc, inverse, values)
        return acc / counts.reshape((-1,) + (1,) * (values.ndim - 1))

    points = mean_of(cloud.points)
    labels = scores = desc = None
    if cloud.labels is not None:
        labels = (mean_of(cloud.labels.astype(np.float64)) >= 0.5).astype(np.uint8)
    if cloud.scores is not None:
        scores = np.clip(mean_of(cloud.scores), 0.0, 1.0)
    if cloud.descriptors is not None:
        d = mean_of(cloud.descriptors.astype(np.float64))
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        desc = d.astype(cloud.descriptors.dtype)
    return PointCloud(points, labels, scores, desc)


def apply_transform(cloud: PointCloud, xf: Transform) -> PointCloud:
    """Map every point by ``xf``; all channels are carried through unchanged."""
    return cloud.with_channels(points=xf.apply(cloud.points))


def sample_mesh_uniform(mesh: TriangleMesh, n: int, seed: int,
                        return_faces: bool = False):
    """Area-weighted uniform surface sampling.

    Args:
        mesh: non-empty triangle mesh.
        n: number of samples.
        seed: RNG seed; identical seeds give identical samples.
        return_faces: also return the face index of every sample.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    b0, b1, b2 = 1.0 - su, su * (1.0 - v), su * v
    tri = mesh.vertices[mesh.faces[face]]
    pts = b0[:, None] * tri[:, 0] + b1[:, None] * tri[:, 1] + b2[:, None] * tri[:, 2]
    cloud = PointCloud(pts)
    return (cloud, face) if return_faces else cloud


def point_line_distance(points: np.ndarray, e0: np.ndarray, e1: np.ndarray) -> np.ndarray:
    """Perpendicular distance from each point to the infinite line through e0, e1."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    base = np.asarray(e1, dtype=np.float64) - np.asarray(e0, dtype=np.float64)
    length = np.linalg.norm(base)
    if length < 1e-9:
        raise ValueError("line endpoints coincide")
    return np.linalg.norm(np.cross(pts - e0, pts - e1), axis=1) / length


def segment_distance(points: np.ndarray, e0: np.ndarray, e1: np.ndarray) -> np.ndarray:
    """Distance from each point to the closed segment e0-e1."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    e0 = np.asarray(e0, dtype=np.float64)
    base = np.asarray(e1, dtype=np.float64) - e0
    denom = base @ base
    if denom < 1e-18:
        raise ValueError("segment endpoints coincide")
    t = np.clip((pts - e0) @ base / denom, 0.0, 1.0)
    return np.linalg.norm(pts - e0 - t[:, None] * base, axis=1)
