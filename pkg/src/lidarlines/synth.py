"""Synthetic training scenes built from line primitives and clutter.

Two primitives model the line types worth detecting: a *wedge* (two planar
faces meeting at a shared edge) and a *pole* (the side surface of a thin
cylinder). Each is surface-sampled, jittered, and merged with background
chunks that carry no line label.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (PointCloud, SE3Transform, TriangleMesh, apply_transform,
                       point_line_distance, sample_mesh_uniform, segment_distance)

BACKGROUND_BOX = 10.0


class PrimitiveKind(str, enum.Enum):
    PLANE_INTERSECTION = "plane_intersection"
    POLE = "pole"


@dataclass(frozen=True)
class PrimitiveSpec:
    """Line primitive in its canonical frame.

    The ground-truth line runs along +z from ``(0, 0, -L/2)`` to ``(0, 0, L/2)``
    where ``L = length``.

    Attributes:
        kind: wedge or pole.
        length: edge length (wedge) or pole height.
        face_widths: extent of the two wedge faces away from the edge.
        dihedral: wedge opening angle in radians, in (0, pi).
        radius: pole radius.
        sides: pole tessellation.
        label_threshold: distance-to-line bound for a positive label; defaults
            to 5% of ``length``.
    """

    kind: PrimitiveKind
    length: float = 1.0
    face_widths: tuple = (1.0, 1.0)
    dihedral: float = np.pi / 2
    radius: float = 0.05
    sides: int = 16
    label_threshold: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PrimitiveKind(self.kind))
        if self.length <= 0:
            raise ValueError("length must be positive")
        if self.kind is PrimitiveKind.PLANE_INTERSECTION:
            if min(self.face_widths) <= 0:
                raise ValueError("face widths must be positive")
            if not 0 < self.dihedral < np.pi:
                raise ValueError("dihedral angle must lie in (0, pi)")
        else:
            if self.radius <= 0:
                raise ValueError("radius must be positive")
            if self.sides < 3:
                raise ValueError("a pole needs at least 3 sides")
        if self.label_threshold is not None and self.label_threshold <= 0:
            raise ValueError("label_threshold must be positive")

    @property
    def threshold(self) -> float:
        if self.label_threshold is not None:
            return self.label_threshold
        return 0.05 * self.length

    def line(self) -> np.ndarray:
        """Ground-truth segment endpoints, shape ``(2, 3)``."""
        h = 0.5 * self.length
        return np.array([[0.0, 0.0, -h], [0.0, 0.0, h]])


@dataclass(frozen=True)
class SceneRecipe:
    primitive: PrimitiveSpec
    n_primitive_points: int = 4000
    noise_fraction: float = 0.05
    n_background_chunks: int = 40
    points_per_chunk: int = 1000
    total_points: int = 5000
    seed: int = 0
    pose: SE3Transform = field(default_factory=SE3Transform)

    def __post_init__(self):
        if self.total_points < self.n_primitive_points:
            raise ValueError("total_points must be at least n_primitive_points")
        if not 0 <= self.noise_fraction < 1:
            raise ValueError("noise_fraction must lie in [0, 1)")
        if self.n_primitive_points <= 0 or self.total_points <= 0:
            raise ValueError("point counts must be positive")
        if self.n_background_chunks < 0 or self.points_per_chunk < 0:
            raise ValueError("background counts must be non-negative")


@dataclass
class SyntheticScene:
    cloud: PointCloud
    lines: np.ndarray  # (n_lines, 2, 3) ground-truth segments, world frame
    kind: PrimitiveKind


def build_primitive_mesh(spec: PrimitiveSpec) -> TriangleMesh:
    h = 0.5 * spec.length
    if spec.kind is PrimitiveKind.PLANE_INTERSECTION:
        wa, wb = spec.face_widths
        ua = np.array([1.0, 0.0, 0.0])
        ub = np.array([np.cos(spec.dihedral), np.sin(spec.dihedral), 0.0])
        lo, hi = np.array([0.0, 0.0, -h]), np.array([0.0, 0.0, h])
        verts = np.array([lo, hi, hi + wa * ua, lo + wa * ua, hi + wb * ub, lo + wb * ub])
        faces = np.array([[0, 1, 2], [0, 2, 3], [0, 5, 4], [0, 4, 1]])
        return TriangleMesh(verts, faces)
    ang = 2 * np.pi * np.arange(spec.sides) / spec.sides
    ring = np.stack([spec.radius * np.cos(ang), spec.radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(spec.sides, -h)])
    top = np.column_stack([ring, np.full(spec.sides, h)])
    verts = np.vstack([bottom, top])
    faces = []
    for i in range(spec.sides):
        j = (i + 1) % spec.sides
        faces.append([i, j, spec.sides + j])
        faces.append([i, spec.sides + j, spec.sides + i])
    return TriangleMesh(verts, np.array(faces))


def perturb_points(cloud: PointCloud, fraction: float, seed: int) -> PointCloud:
    """Jitter each point uniformly by up to ``fraction`` of the bbox diagonal per axis."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    if fraction == 0 or len(cloud) == 0:
        return cloud.with_channels(points=cloud.points.copy())
    diag = np.linalg.norm(cloud.points.max(axis=0) - cloud.points.min(axis=0))
    rng = np.random.default_rng(seed)
    bound = fraction * diag
    offsets = rng.uniform(-bound, bound, size=cloud.points.shape)
    return cloud.with_channels(points=cloud.points + offsets)


def _procedural_chunk(rng: np.random.Generator, n: int) -> np.ndarray:
    if rng.random() < 0.5:
        # planar patch
        size = rng.uniform(0.5, 3.0, size=2)
        uv = rng.uniform(-0.5, 0.5, size=(n, 2)) * size
        pts = np.column_stack([uv, rng.normal(0.0, 0.01, size=n)])
    else:
        # anisotropic gaussian blob
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 0.6, size=3)
    rot = Rotation.random(random_state=rng).as_matrix()
    return pts @ rot.T


def _crop_chunk(rng: np.random.Generator, source: PointCloud, n: int) -> np.ndarray:
    center = int(rng.integers(len(source)))
    _, idx = source.index.tree.query(source.points[center], k=n)
    pts = source.points[np.atleast_1d(idx)]
    return pts - pts.mean(axis=0)


def compose_scene(recipe: SceneRecipe,
                  background_source: Optional[PointCloud] = None) -> SyntheticScene:
    """Sample, jitter and label the primitive, then add background clutter.

    Args:
        recipe: scene parameters; ``recipe.pose`` places the primitive.
        background_source: cloud to crop clutter from; ``None`` selects the
            procedural generator.

    Raises:
        ValueError: when the crop source is too small or the merged scene has
            fewer than ``total_points`` points.
    """
    spec = recipe.primitive
    need = recipe.n_background_chunks * recipe.points_per_chunk
    if background_source is not None and len(background_source) < need:
        raise ValueError(
            f"background source has {len(background_source)} points, "
            f"needs {need} ({need - len(background_source)} short)")
    seeds = np.random.SeedSequence(recipe.seed).spawn(3)
    rng = np.random.default_rng(seeds[2])

    prim = sample_mesh_uniform(build_primitive_mesh(spec), recipe.n_primitive_points,
                               seed=int(seeds[0].generate_state(1)[0]))
    prim = perturb_points(prim, recipe.noise_fraction, seed=int(seeds[1].generate_state(1)[0]))
    e0, e1 = spec.line()
    labels = (point_line_distance(prim.points, e0, e1) <= spec.threshold).astype(np.uint8)
    prim_pts = recipe.pose.apply(prim.points)
    line = recipe.pose.apply(spec.line())

    chunks = []
    center = prim_pts.mean(axis=0)
    for _ in range(recipe.n_background_chunks):
        if background_source is None:
            chunk = _procedural_chunk(rng, recipe.points_per_chunk)
        else:
            chunk = _crop_chunk(rng, background_source, recipe.points_per_chunk)
        offset = rng.uniform(-0.5 * BACKGROUND_BOX, 0.5 * BACKGROUND_BOX, size=3)
        chunks.append(chunk + center + offset)

    pts = np.vstack([prim_pts] + chunks) if chunks else prim_pts
    lab = np.concatenate([labels, np.zeros(len(pts) - len(labels), np.uint8)])
    if len(pts) < recipe.total_points:
        raise ValueError(f"scene has {len(pts)} points, fewer than total_points="
                         f"{recipe.total_points}")
    keep = np.sort(rng.choice(len(pts), size=recipe.total_points, replace=False))
    cloud = PointCloud(pts[keep], labels=lab[keep])
    return SyntheticScene(cloud, line[None], spec.kind)


def random_primitive(rng: np.random.Generator, kind: Optional[PrimitiveKind] = None) -> PrimitiveSpec:
    """Desk-scale primitive with randomized kind and dimensions."""
    if kind is None:
        kind = PrimitiveKind.POLE if rng.random() < 0.5 else PrimitiveKind.PLANE_INTERSECTION
    length = rng.uniform(1.0, 2.0)
    if kind is PrimitiveKind.PLANE_INTERSECTION:
        return PrimitiveSpec(kind, length=length,
                             face_widths=tuple(rng.uniform(0.5, 1.5, size=2)),
                             dihedral=rng.uniform(np.radians(60), np.radians(150)))
    return PrimitiveSpec(kind, length=length, radius=rng.uniform(0.01, 0.04) * length)


def random_pose(rng: np.random.Generator, translation_scale: float = 5.0) -> SE3Transform:
    rot = Rotation.random(random_state=rng).as_matrix()
    return SE3Transform(rot, rng.uniform(-translation_scale, translation_scale, size=3))


def desk_recipe_sampler(n_primitive_points: int = 400, noise_fraction: float = 0.02,
                        n_background_chunks: int = 6, points_per_chunk: int = 100,
                        total_points: int = 512) -> Callable[[np.random.Generator, int], SceneRecipe]:
    """Recipe sampler for small training scenes."""

    def sample(rng: np.random.Generator, seed: int) -> SceneRecipe:
        return SceneRecipe(random_primitive(rng), n_primitive_points, noise_fraction,
                           n_background_chunks, points_per_chunk, total_points, seed,
                           pose=random_pose(rng))

    return sample


def full_scale_recipe_sampler() -> Callable[[np.random.Generator, int], SceneRecipe]:
    return desk_recipe_sampler(4000, 0.05, 40, 1000, 5000)


def _valid(scene: SyntheticScene) -> bool:
    lab = scene.cloud.labels
    return bool(lab.any() and not lab.all())


def generate_dataset(n_clouds: int,
                     recipe_sampler: Optional[Callable] = None,
                     seed: int = 0,
                     background_source: Optional[PointCloud] = None) -> List[SyntheticScene]:
    """Independent scenes, each drawn from its own child seed of ``seed``."""
    if n_clouds <= 0:
        raise ValueError("n_clouds must be positive")
    sampler = recipe_sampler or desk_recipe_sampler()
    scenes = []
    for child in np.random.SeedSequence(seed).spawn(n_clouds):
        rng = np.random.default_rng(child)
        while True:
            recipe = sampler(rng, int(rng.integers(2**31)))
            scene = compose_scene(recipe, background_source)
            if _valid(scene):
                break
        scenes.append(scene)
    return scenes


# -- multi-line scenes for registration ----------------------------------

@dataclass(frozen=True)
class LineSceneConfig:
    """Street-like layout of poles and building edges over a square area."""

    n_lines: int = 8
    extent: float = 40.0
    point_spacing: float = 0.05
    transverse_noise: float = 0.01
    min_separation: float = 2.0
    n_clutter: int = 400

    def __post_init__(self):
        if self.n_lines < 4:
            raise ValueError("need at least four lines")
        if self.point_spacing <= 0 or self.transverse_noise < 0:
            raise ValueError("invalid sampling parameters")


@dataclass
class LineScene:
    """World-frame line segments with a sampled cloud.

    ``line_ids`` gives the generating line of each point (-1 for clutter).
    """

    cloud: PointCloud
    lines: np.ndarray
    line_ids: np.ndarray


def _segment_gap(a: np.ndarray, b: np.ndarray, samples: int = 16) -> float:
    t = np.linspace(0.0, 1.0, samples)[:, None]
    pa = a[0] + t * (a[1] - a[0])
    pb = b[0] + t * (b[1] - b[0])
    return float(np.min(np.linalg.norm(pa[:, None] - pb[None], axis=2)))


def random_line_layout(rng: np.random.Generator, cfg: LineSceneConfig = LineSceneConfig()) -> np.ndarray:
    """``(n_lines, 2, 3)`` segments: vertical poles, horizontal edges and tilted struts.

    The first three lines are a pole, an edge along x-ish and an edge roughly
    orthogonal to it, so every layout has non-parallel lines in all axes.
    """
    half = 0.5 * cfg.extent
    lines: List[np.ndarray] = []
    attempts = 0
    while len(lines) < cfg.n_lines:
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("could not place lines with the requested separation")
        kind = len(lines) % 3 if len(lines) < 3 else int(rng.integers(3))
        base = np.array([*rng.uniform(-half, half, size=2), 0.0])
        length = rng.uniform(2.0, 8.0)
        if kind == 0:
            base[2] = rng.uniform(0.0, 1.0)
            d = np.array([0.0, 0.0, 1.0])
        else:
            yaw = rng.uniform(0, np.pi)
            if len(lines) == 2:
                first_edge = lines[1][1] - lines[1][0]
                yaw = np.arctan2(first_edge[1], first_edge[0]) + np.pi / 2 + rng.uniform(-0.3, 0.3)
            tilt = 0.0 if kind == 1 else rng.uniform(np.radians(20), np.radians(60))
            d = np.array([np.cos(yaw) * np.cos(tilt), np.sin(yaw) * np.cos(tilt), np.sin(tilt)])
            base[2] = rng.uniform(0.5, 5.0)
        seg = np.stack([base, base + length * d])
        if all(_segment_gap(seg, other) >= cfg.min_separation for other in lines):
            lines.append(seg)
    return np.stack(lines)


def sample_line_scene(lines: np.ndarray, rng: np.random.Generator,
                      cfg: LineSceneConfig = LineSceneConfig()) -> LineScene:
    """Jittered samples along every segment plus clutter blobs away from the lines."""
    pts, ids = [], []
    for i, (a, b) in enumerate(lines):
        length = np.linalg.norm(b - a)
        n = max(int(length / cfg.point_spacing), 2)
        t = np.sort(rng.uniform(0.0, 1.0, size=n))
        p = a + t[:, None] * (b - a)
        pts.append(p + rng.normal(0.0, cfg.transverse_noise, size=p.shape))
        ids.append(np.full(n, i))
    half = 0.5 * cfg.extent
    clutter = []
    while len(clutter) < cfg.n_clutter:
        c = np.array([*rng.uniform(-half, half, size=2), rng.uniform(0.0, 3.0)])
        blob = c + rng.normal(0.0, 0.4, size=(20, 3))
        far = np.ones(len(blob), dtype=bool)
        for a, b in lines:
            far &= segment_distance(blob, a, b) > 1.0
        clutter.extend(blob[far])
    pts.append(np.asarray(clutter[:cfg.n_clutter]).reshape(-1, 3))
    ids.append(np.full(min(len(clutter), cfg.n_clutter), -1))
    all_pts, all_ids = np.vstack(pts), np.concatenate(ids)
    labels = (all_ids >= 0).astype(np.uint8)
    return LineScene(PointCloud(all_pts, labels=labels), np.asarray(lines, dtype=np.float64), all_ids)


@dataclass
class RegistrationPair:
    source: LineScene
    target: LineScene
    pose: SE3Transform  # maps source coordinates into the target frame


def planar_perturbation(rng: np.random.Generator, max_translation: float = 20.0) -> SE3Transform:
    """Uniform yaw in [-pi, pi) and planar translation uniform in a disk."""
    yaw = rng.uniform(-np.pi, np.pi)
    r = max_translation * np.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * np.pi)
    return SE3Transform.from_yaw(yaw, (r * np.cos(phi), r * np.sin(phi), 0.0))


def registration_pair(seed: int, cfg: LineSceneConfig = LineSceneConfig(),
                      max_translation: float = 20.0) -> RegistrationPair:
    """Two independent samplings of one layout; the source is moved by a planar pose."""
    rng = np.random.default_rng(seed)
    lines = random_line_layout(rng, cfg)
    target = sample_line_scene(lines, rng, cfg)
    pose = planar_perturbation(rng, max_translation)
    src_world = sample_line_scene(lines, rng, cfg)
    inv = pose.inverse()
    source = LineScene(apply_transform(src_world.cloud, inv),
                       np.stack([inv.apply(l) for l in lines]), src_world.line_ids)
    return RegistrationPair(source, target, pose)
