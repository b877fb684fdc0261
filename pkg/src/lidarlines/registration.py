"""Point-to-line registration of matched line segments.

Each matched line contributes one residual per source member point: the
perpendicular offset of the transformed point from the infinite target line.
The pose is refined with Levenberg-Marquardt on a right-composed
(axis-angle, translation) increment, ``T <- T * exp(delta)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .geometry import SE3Transform, exp_so3, yaw_rotation
from .lines import LineMatch, LineSegment

log = logging.getLogger(__name__)

PARALLEL_TOLERANCE_DEG = 1.0


class RegistrationError(RuntimeError):
    pass


class DegenerateGeometryError(RegistrationError):
    """Target lines do not constrain all six degrees of freedom."""


class RegistrationFailedError(RegistrationError):
    """Too few consistent matches to estimate a pose."""


def point_to_line_cost(T: SE3Transform, p: np.ndarray, e0: np.ndarray, e1: np.ndarray) -> float:
    """Distance from ``T p`` to the infinite line through ``e0`` and ``e1``."""
    e0 = np.asarray(e0, dtype=np.float64)
    e1 = np.asarray(e1, dtype=np.float64)
    base = np.linalg.norm(e1 - e0)
    if base < 1e-9:
        raise ValueError("line endpoints coincide")
    q = T.apply(np.asarray(p, dtype=np.float64).reshape(1, 3))[0]
    return float(np.linalg.norm(np.cross(q - e0, q - e1)) / base)


@dataclass
class MatchedLine:
    """Source member points paired with a target segment's endpoints."""

    source_points: np.ndarray
    e0: np.ndarray
    e1: np.ndarray

    def __post_init__(self):
        self.source_points = np.asarray(self.source_points, dtype=np.float64).reshape(-1, 3)
        self.e0 = np.asarray(self.e0, dtype=np.float64)
        self.e1 = np.asarray(self.e1, dtype=np.float64)
        if len(self.source_points) == 0:
            raise ValueError("matched line has no source points")
        if np.linalg.norm(self.e1 - self.e0) < 1e-9:
            raise ValueError("target endpoints coincide")

    @property
    def direction(self) -> np.ndarray:
        d = self.e1 - self.e0
        return d / np.linalg.norm(d)

    def distances(self, T: SE3Transform) -> np.ndarray:
        q = T.apply(self.source_points) - self.e0
        u = self.direction
        return np.linalg.norm(q - np.outer(q @ u, u), axis=1)

    def mean_distance(self, T: SE3Transform) -> float:
        return float(self.distances(T).mean())


@dataclass
class RegistrationProblem:
    matches: List[MatchedLine]
    initial: SE3Transform = field(default_factory=SE3Transform.identity)

    @classmethod
    def from_segments(cls, source_points: np.ndarray, source: Sequence[LineSegment],
                      target: Sequence[LineSegment], matches: Sequence[LineMatch],
                      initial: Optional[SE3Transform] = None) -> "RegistrationProblem":
        src = np.asarray(source_points, dtype=np.float64)
        lines = [MatchedLine(src[source[m.source].member_indices],
                             target[m.target].e0, target[m.target].e1) for m in matches]
        return cls(lines, initial or SE3Transform.identity())

    def subset(self, keep: Sequence[int]) -> "RegistrationProblem":
        return replace(self, matches=[self.matches[i] for i in keep])


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    step_tolerance: float = 1e-8
    damping: float = 1e-4
    outlier_distance: float = 1.0
    outlier_rounds: int = 3
    # Extra yaw starting points (evenly spaced) tried besides the initial pose.
    yaw_starts: int = 8
    # Cauchy-weighted alignment before the first rejection round.
    robust_start: bool = True
    robust_scale: float = 0.5

    def __post_init__(self):
        if min(self.max_iterations, self.step_tolerance, self.damping,
               self.outlier_distance, self.outlier_rounds, self.robust_scale) <= 0:
            raise ValueError("solver settings must be positive")
        if self.yaw_starts < 0:
            raise ValueError("yaw_starts must be non-negative")


@dataclass
class SolveResult:
    transform: SE3Transform
    converged: bool
    iterations: int
    cost: float
    line_distances: np.ndarray
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    rounds: int = 0
    cost_history: List[float] = field(default_factory=list)


def check_observability(problem: RegistrationProblem) -> None:
    """Raise unless at least two target lines are non-parallel."""
    if len(problem.matches) < 2:
        raise DegenerateGeometryError("need at least two matched lines")
    dirs = np.stack([m.direction for m in problem.matches])
    cos = np.abs(dirs @ dirs[0])
    if np.all(cos >= np.cos(np.radians(PARALLEL_TOLERANCE_DEG))):
        raise DegenerateGeometryError("all target lines are parallel")


def _skew(v: np.ndarray) -> np.ndarray:
    """Stacked cross-product matrices of the rows of ``v``."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


class _Stacked:
    """All residual data of a problem in flat arrays."""

    def __init__(self, problem: RegistrationProblem):
        self.p = np.vstack([m.source_points for m in problem.matches])
        counts = [len(m.source_points) for m in problem.matches]
        self.line = np.repeat(np.arange(len(counts)), counts)
        self.counts = np.asarray(counts)
        e0 = np.stack([m.e0 for m in problem.matches])
        u = np.stack([m.direction for m in problem.matches])
        self.e0 = e0[self.line]
        self.u = u[self.line]
        self.proj = (np.eye(3) - u[:, :, None] * u[:, None, :])[self.line]
        self.skew_p = _skew(self.p)

    def residuals(self, T: SE3Transform) -> np.ndarray:
        q = self.p @ T.rotation.T + T.translation - self.e0
        return q - np.sum(q * self.u, axis=1, keepdims=True) * self.u

    def cost(self, T: SE3Transform, weights: Optional[np.ndarray] = None) -> float:
        r = self.residuals(T)
        sq = np.einsum("ni,ni->n", r, r)
        return float(sq.sum() if weights is None else weights @ sq)

    def robust_cost(self, T: SE3Transform, scale: float) -> float:
        r = self.residuals(T)
        return float(np.log1p(np.einsum("ni,ni->n", r, r) / scale ** 2).sum())

    def cauchy_weights(self, T: SE3Transform, scale: float) -> np.ndarray:
        r = self.residuals(T)
        return 1.0 / (1.0 + np.einsum("ni,ni->n", r, r) / scale ** 2)

    def jacobian(self, T: SE3Transform, world_translation: bool = False) -> np.ndarray:
        R = T.rotation
        pr = self.proj @ R
        j_t = np.broadcast_to(self.proj, pr.shape) if world_translation else pr
        return np.concatenate([-(pr @ self.skew_p), j_t], axis=2)

    def line_distances(self, T: SE3Transform) -> np.ndarray:
        d = np.linalg.norm(self.residuals(T), axis=1)
        return np.bincount(self.line, weights=d, minlength=len(self.counts)) / self.counts


def _retract(T: SE3Transform, delta: np.ndarray, world_translation: bool = False) -> SE3Transform:
    R = _orthonormalize(T.rotation @ exp_so3(delta[:3]))
    dt = delta[3:] if world_translation else T.rotation @ delta[3:]
    return SE3Transform(R, T.translation + dt)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def _levenberg_marquardt(data: _Stacked, T: SE3Transform, cfg: SolverConfig,
                         free: np.ndarray, weights: Optional[np.ndarray] = None,
                         world_translation: bool = False):
    lam = cfg.damping
    cost = data.cost(T, weights)
    w3 = None if weights is None else np.repeat(weights, 3)
    converged = False
    history = [cost]
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        r = data.residuals(T).reshape(-1)
        J = data.jacobian(T, world_translation).reshape(-1, 6)[:, free]
        Jw = J if w3 is None else J * w3[:, None]
        H = Jw.T @ J
        g = Jw.T @ r
        if np.linalg.norm(g) < 1e-14:
            converged = True
            break
        diag = np.maximum(np.diag(H), 1e-12)
        step_ok = False
        while lam < 1e12:
            try:
                dx = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            delta = np.zeros(6)
            delta[free] = dx
            cand = _retract(T, delta, world_translation)
            c_new = data.cost(cand, weights)
            if c_new <= cost:
                T, cost = cand, c_new
                history.append(cost)
                lam = max(lam / 10, 1e-12)
                step_ok = True
                break
            lam *= 10
        if not step_ok or np.linalg.norm(dx) < cfg.step_tolerance:
            converged = True
            break
    return T, cost, converged, it, history


def _start_poses(problem: RegistrationProblem, data: _Stacked, cfg: SolverConfig):
    yield problem.initial
    if cfg.yaw_starts == 0:
        return
    src_c = data.p.mean(axis=0)
    mids = np.stack([0.5 * (m.e0 + m.e1) for m in problem.matches])
    tgt_c = (mids * data.counts[:, None]).sum(axis=0) / data.counts.sum()
    for k in range(cfg.yaw_starts):
        R = yaw_rotation(2 * np.pi * k / cfg.yaw_starts)
        yield SE3Transform(R, tgt_c - R @ src_c)


def solve(problem: RegistrationProblem, cfg: SolverConfig = SolverConfig(),
          dof_mask: Optional[Sequence[bool]] = None) -> SolveResult:
    """Least-squares pose minimizing the summed squared point-to-line distances.

    Starts from ``problem.initial`` and, unless ``cfg.yaw_starts`` is 0 or a
    ``dof_mask`` is given, from evenly spaced yaw angles with centroids
    aligned; the lowest-cost result wins.

    Args:
        dof_mask: six booleans (rx, ry, rz, tx, ty, tz); ``False`` entries
            are held fixed. Rotation entries refer to the body axes, and with
            a mask the translation entries refer to world axes, so a mask of
            ``(0, 0, 1, 1, 0, 0)`` on a yaw-only start searches exactly over
            yaw and world x.

    Raises:
        DegenerateGeometryError: fewer than two lines or all lines parallel.
    """
    check_observability(problem)
    data = _Stacked(problem)
    if dof_mask is None:
        free = np.ones(6, dtype=bool)
        starts = list(_start_poses(problem, data, cfg))
    else:
        free = np.asarray(dof_mask, dtype=bool)
        starts = [problem.initial]
    best = None
    for T0 in starts:
        run = _levenberg_marquardt(data, T0, cfg, free, world_translation=dof_mask is not None)
        if best is None or run[1] < best[1] - 1e-12 * max(1.0, best[1]):
            best = run
    T, cost, conv, it, history = best
    if not conv:
        log.info("registration did not converge in %d iterations", it)
    return SolveResult(T, conv, it, cost, data.line_distances(T),
                       np.arange(len(problem.matches)), cost_history=history)


def _irls(data: _Stacked, T: SE3Transform, cfg: SolverConfig, free: np.ndarray,
          scale: float, rounds: int = 20):
    """Cauchy-weighted refinement by iteratively reweighted least squares."""
    for _ in range(rounds):
        w = data.cauchy_weights(T, scale)
        T_new = _levenberg_marquardt(data, T, cfg, free, w)[0]
        rel = T.inverse().compose(T_new)
        T = T_new
        if np.linalg.norm(rel.translation) + np.linalg.norm(rel.rotation - np.eye(3)) < 1e-9:
            break
    return T


def robust_align(problem: RegistrationProblem, cfg: SolverConfig = SolverConfig()) -> SE3Transform:
    """Coarse pose that tolerates grossly wrong matches.

    Residuals are down-weighted with a Cauchy kernel of scale
    ``cfg.robust_scale``; every start pose of :func:`solve` is refined
    and the one with the lowest robust cost is returned.
    """
    check_observability(problem)
    data = _Stacked(problem)
    free = np.ones(6, dtype=bool)
    best = None
    for T0 in _start_poses(problem, data, cfg):
        T = _irls(data, T0, cfg, free, cfg.robust_scale)
        c = data.robust_cost(T, cfg.robust_scale)
        if best is None or c < best[1] - 1e-12 * max(1.0, best[1]):
            best = (T, c)
    return best[0]


def register_with_outlier_rejection(problem: RegistrationProblem,
                                    cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Solve, drop matches farther than ``outlier_distance`` on average, re-solve.

    With ``cfg.robust_start`` the initial alignment is :func:`robust_align`,
    so wrong matches cannot drag every line past the rejection distance;
    otherwise it is a plain :func:`solve`. Each round drops the far matches
    and re-solves on the survivors by plain least squares, which always
    produces the returned pose.

    Raises:
        RegistrationFailedError: fewer than two matches survive.
        DegenerateGeometryError: survivors are all parallel.
    """
    keep = np.arange(len(problem.matches))
    if len(keep) < 2:
        raise RegistrationFailedError("fewer than two matches")
    if cfg.robust_start:
        T = robust_align(problem, cfg)
        dist = _Stacked(problem).line_distances(T)
        result = None
    else:
        result = solve(problem, cfg)
        T, dist = result.transform, result.line_distances
    rounds = 0
    while rounds < cfg.outlier_rounds:
        good = dist <= cfg.outlier_distance
        if good.all() and result is not None:
            break
        if not good.all():
            keep = keep[good]
            rounds += 1
        if len(keep) < 2:
            raise RegistrationFailedError(f"only {len(keep)} matches survived outlier rejection")
        result = solve(replace(problem.subset(keep), initial=T), cfg)
        T, dist = result.transform, result.line_distances
    result.inliers = keep
    result.rounds = rounds
    return result
