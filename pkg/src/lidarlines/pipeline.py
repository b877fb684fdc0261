"""Scan to pose: segment, extract lines, describe, match and register."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .autolabel import AdaptationConfig, extract_segments
from .geometry import PointCloud, SE3Transform
from .lines import (MATCH_THRESHOLD, LineMatch, LineSegment, describe_lines,
                    geometric_line_descriptors, match_lines)
from .net import MicroNet
from .registration import (RegistrationFailedError, RegistrationProblem, SolveResult,
                           SolverConfig, register_with_outlier_rejection)


@dataclass
class Extraction:
    cloud: PointCloud
    segments: List[LineSegment]


@dataclass
class LinePipeline:
    """Registration pipeline over line features.

    With ``model`` unset, line points come from the cloud's own labels (an
    oracle segmentation) and line descriptors are the hand-crafted
    geometric ones; with a model, its predictions and learned point
    descriptors are used instead, on at most ``max_points`` randomly kept
    points.
    """

    model: Optional[MicroNet] = None
    extract_cfg: AdaptationConfig = field(default_factory=AdaptationConfig)
    solver_cfg: SolverConfig = field(default_factory=SolverConfig)
    match_threshold: float = MATCH_THRESHOLD
    max_points: Optional[int] = None
    seed: int = 0
    last: Optional[SolveResult] = None

    def extract(self, cloud: PointCloud) -> Extraction:
        if self.model is None:
            if cloud.labels is None:
                raise ValueError("oracle extraction needs labeled clouds")
            mask = cloud.labels.astype(bool)
            segments, _ = extract_segments(cloud, mask, self.extract_cfg)
            desc = geometric_line_descriptors(segments)
            segments = [_with_descriptor(s, d) for s, d in zip(segments, desc)]
            return Extraction(cloud, segments)
        if self.max_points is not None and len(cloud) > self.max_points:
            rng = np.random.default_rng(self.seed)
            cloud = cloud.subset(np.sort(rng.choice(len(cloud), self.max_points, replace=False)))
        res = self.model.forward(cloud.points)
        mask = res.seg_probs[:, 1] > res.seg_probs[:, 0]
        described = cloud.with_channels(descriptors=res.descriptors.astype(np.float64),
                                        scores=res.seg_probs[:, 1].astype(np.float64))
        segments, _ = extract_segments(described, mask, self.extract_cfg)
        return Extraction(described, describe_lines(described, segments))

    def match(self, source: Extraction, target: Extraction) -> List[LineMatch]:
        return match_lines(source.segments, target.segments, self.match_threshold)

    def register(self, source: PointCloud, target: PointCloud) -> SolveResult:
        src, tgt = self.extract(source), self.extract(target)
        matches = self.match(src, tgt)
        if len(matches) < 2:
            raise RegistrationFailedError(f"only {len(matches)} line matches")
        problem = RegistrationProblem.from_segments(src.cloud.points, src.segments,
                                                    tgt.segments, matches)
        self.last = register_with_outlier_rejection(problem, self.solver_cfg)
        return self.last

    def __call__(self, source: PointCloud, target: PointCloud) -> SE3Transform:
        return self.register(source, target).transform


def _with_descriptor(seg: LineSegment, desc: np.ndarray) -> LineSegment:
    return replace(seg, mean_descriptor=np.asarray(desc, dtype=np.float64))
