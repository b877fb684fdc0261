"""Registration metrics and the benchmark harness."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import PointCloud, SE3Transform, apply_transform
from .registration import RegistrationError

log = logging.getLogger(__name__)

SUCCESS_RTE = 2.0
SUCCESS_RRE = 5.0


@dataclass(frozen=True)
class PoseError:
    rte: float
    rre: float

    def __post_init__(self):
        if self.rte < 0 or not 0 <= self.rre <= 180:
            raise ValueError("invalid pose error")


def pose_error(T_est: SE3Transform, T_gt: SE3Transform) -> PoseError:
    """Translation (m) and rotation (deg) of ``T_gt^-1 * T_est``."""
    rel = T_gt.inverse().compose(T_est)
    c = np.clip((np.trace(rel.rotation) - 1.0) / 2.0, -1.0, 1.0)
    return PoseError(float(np.linalg.norm(rel.translation)), float(np.degrees(np.arccos(c))))


def is_success(err: Optional[PoseError]) -> bool:
    return err is not None and err.rte < SUCCESS_RTE and err.rre < SUCCESS_RRE


def _stats(values: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    if len(values) == 0:
        return None, None
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


@dataclass
class BenchmarkReport:
    """Per-pair errors (``None`` where the pipeline failed) and summaries.

    ``mean_*``/``std_*`` use successful pairs only; the ``all_*`` variants
    use every pair that produced an estimate.
    """

    errors: List[Optional[PoseError]]
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = [f"pair_{i:04d}" for i in range(len(self.errors))]

    @property
    def successes(self) -> List[bool]:
        return [is_success(e) for e in self.errors]

    @property
    def recall(self) -> float:
        return sum(self.successes) / len(self.errors) if self.errors else 0.0

    def _summary(self, only_success: bool):
        errs = [e for e, ok in zip(self.errors, self.successes)
                if e is not None and (ok or not only_success)]
        return _stats([e.rte for e in errs]), _stats([e.rre for e in errs])

    @property
    def mean_rte(self):
        return self._summary(True)[0][0]

    @property
    def mean_rre(self):
        return self._summary(True)[1][0]

    def to_dict(self) -> dict:
        (m_t, s_t), (m_r, s_r) = self._summary(True)
        (am_t, as_t), (am_r, as_r) = self._summary(False)
        return {
            "pairs": len(self.errors),
            "successes": int(sum(self.successes)),
            "failures": int(sum(e is None for e in self.errors)),
            "recall": self.recall,
            "rte_mean": m_t, "rte_std": s_t, "rre_mean": m_r, "rre_std": s_r,
            "all_rte_mean": am_t, "all_rte_std": as_t,
            "all_rre_mean": am_r, "all_rre_std": as_r,
            "per_pair": [
                {"name": n, "rte": None if e is None else e.rte,
                 "rre": None if e is None else e.rre, "success": ok}
                for n, e, ok in zip(self.names, self.errors, self.successes)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self, method: str = "lines") -> str:
        """Aligned text table: method, RTE mean/std, RRE mean/std, recall."""

        def fmt(v, digits):
            return "-" if v is None else f"{v:.{digits}f}"

        d = self.to_dict()
        header = ["Method", "RTE mean (m)", "RTE std (m)", "RRE mean (deg)", "RRE std (deg)", "Recall"]
        row = [method, fmt(d["rte_mean"], 3), fmt(d["rte_std"], 3), fmt(d["rre_mean"], 3),
               fmt(d["rre_std"], 3), f"{100 * d['recall']:.2f}%"]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
                 "  ".join("-" * w for w in widths),
                 "  ".join(r.ljust(w) for r, w in zip(row, widths))]
        return "\n".join(lines) + "\n"


Pipeline = Callable[[PointCloud, PointCloud], Optional[SE3Transform]]


def run_benchmark(pairs: Sequence[Tuple[PointCloud, PointCloud, SE3Transform]],
                  pipeline: Pipeline,
                  perturbation_sampler: Optional[Callable[[np.random.Generator], SE3Transform]] = None,
                  seed: int = 0, names: Optional[Sequence[str]] = None) -> BenchmarkReport:
    """Score ``pipeline`` on ``(source, target, T_gt)`` triples.

    ``T_gt`` maps source coordinates into the target frame. When a sampler is
    given, each source is additionally moved by a sampled transform ``P``
    and the ground truth becomes ``T_gt * P^-1``. Exceptions derived from
    :class:`RegistrationError` and ``None`` results count as failures.
    """
    rng = np.random.default_rng(seed)
    errors: List[Optional[PoseError]] = []
    for source, target, T_gt in pairs:
        if perturbation_sampler is not None:
            P = perturbation_sampler(rng)
            source = apply_transform(source, P)
            T_gt = T_gt.compose(P.inverse())
        try:
            T_est = pipeline(source, target)
        except RegistrationError as exc:
            log.info("pair failed: %s", exc)
            T_est = None
        errors.append(None if T_est is None else pose_error(T_est, T_gt))
    return BenchmarkReport(errors, list(names) if names is not None else [])
