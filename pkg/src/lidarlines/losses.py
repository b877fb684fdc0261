"""Training objective: per-point cross-entropy plus discriminative line terms.

Descriptor terms operate on line means ``mu_i`` (arithmetic mean of member
descriptors) with L1 distances and squared hinges:

* ``same``     pulls member descriptors to within ``delta_s`` of their mean,
* ``diff``     pushes means of different lines at least ``2 delta_d`` apart,
* ``match``    pulls means of corresponding lines across two clouds together,
* ``mismatch`` pushes means of non-corresponding lines across clouds apart.

Each function that takes descriptors can also return the gradient with
respect to them so the network can be trained without an autograd library.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    delta_s: float = 0.1
    delta_d: float = 1.0
    omega: float = 2.0

    def __post_init__(self):
        if not self.delta_d > self.delta_s > 0:
            raise ValueError("margins must satisfy delta_d > delta_s > 0")
        if self.omega <= 0:
            raise ValueError("omega must be positive")


@dataclass
class LineGroup:
    """Member index lists of the lines in one cloud and their mean descriptors."""

    members: List[np.ndarray]
    means: np.ndarray

    def __post_init__(self):
        seen = set()
        for m in self.members:
            if len(m) == 0:
                raise ValueError("line with no members")
            s = set(int(i) for i in m)
            if seen & s:
                raise ValueError("line member lists overlap")
            seen |= s

    @classmethod
    def from_descriptors(cls, descriptors: np.ndarray, members: Sequence) -> "LineGroup":
        members = [np.asarray(m, dtype=np.int64) for m in members]
        d = np.asarray(descriptors, dtype=np.float64)
        means = (np.stack([d[m].mean(axis=0) for m in members])
                 if members else np.zeros((0, d.shape[1])))
        return cls(members, means)

    def __len__(self) -> int:
        return len(self.members)


class DescriptorLosses(NamedTuple):
    same: float
    diff: float
    match: float
    mismatch: float


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def seg_loss(seg_probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class."""
    probs = np.asarray(seg_probs, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    p = probs[np.arange(len(lab)), lab]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def seg_loss_grad(seg_logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Cross-entropy from logits and its gradient with respect to the logits."""
    logits = np.asarray(seg_logits, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    n = len(lab)
    probs = softmax(logits)
    loss = seg_loss(probs, lab)
    grad = probs.copy()
    grad[np.arange(n), lab] -= 1.0
    floored = probs[np.arange(n), lab] < PROB_FLOOR
    grad[floored] = 0.0
    return loss, grad / n


def _hinge_pull(v: np.ndarray, margin: float):
    """``[||v||_1 - margin]_+^2`` per row and its row gradient."""
    h = np.maximum(np.abs(v).sum(axis=-1) - margin, 0.0)
    return h ** 2, 2.0 * h[..., None] * np.sign(v)


def _hinge_push(v: np.ndarray, margin: float):
    """``[margin - ||v||_1]_+^2`` per row and its row gradient."""
    h = np.maximum(margin - np.abs(v).sum(axis=-1), 0.0)
    return h ** 2, -2.0 * h[..., None] * np.sign(v)


def _mean_grad_to_points(grad_means: np.ndarray, members, n_points: int, dim: int) -> np.ndarray:
    g = np.zeros((n_points, dim))
    for gm, m in zip(grad_means, members):
        g[m] += gm / len(m)
    return g


def _single_cloud_terms(desc: np.ndarray, members, cfg: LossConfig):
    n_lines = len(members)
    dim = desc.shape[1]
    grad = np.zeros_like(desc)
    if n_lines == 0:
        return 0.0, 0.0, grad, np.zeros((0, dim)), np.zeros((0, dim))
    means = np.stack([desc[m].mean(axis=0) for m in members])
    grad_means = np.zeros_like(means)

    same = 0.0
    for i, m in enumerate(members):
        val, g = _hinge_pull(means[i] - desc[m], cfg.delta_s)
        w = 1.0 / (n_lines * len(m))
        same += w * val.sum()
        g *= w
        grad[m] -= g
        grad_means[i] += g.sum(axis=0)

    diff = 0.0
    if n_lines >= 2:
        a, b = np.triu_indices(n_lines, k=1)
        w = 1.0 / len(a)
        val, g = _hinge_push(means[a] - means[b], 2.0 * cfg.delta_d)
        diff = w * val.sum()
        g *= w
        np.add.at(grad_means, a, g)
        np.add.at(grad_means, b, -g)
    return same, diff, grad, means, grad_means


def single_cloud_losses_grad(desc: np.ndarray, members: Sequence, cfg: LossConfig = LossConfig()):
    """``(same, diff)`` of one cloud and their gradient w.r.t. ``desc``."""
    desc = np.asarray(desc, dtype=np.float64)
    members = [np.asarray(m, dtype=np.int64) for m in members]
    same, diff, grad, _, gmeans = _single_cloud_terms(desc, members, cfg)
    grad += _mean_grad_to_points(gmeans, members, len(desc), desc.shape[1])
    return float(same), float(diff), grad


def cross_cloud_losses_grad(desc_a: np.ndarray, members_a: Sequence, desc_b: np.ndarray,
                            members_b: Sequence, correspondences: Optional[Sequence],
                            cfg: LossConfig = LossConfig()):
    """``(match, mismatch)`` over line correspondences and gradients for both clouds.

    ``mismatch`` runs over unordered correspondence pairs ``a < b`` and compares
    the A-side mean of ``a`` with the B-side mean of ``b``.
    """
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    grad_a = np.zeros_like(desc_a)
    grad_b = np.zeros_like(desc_b)
    pairs = np.asarray(correspondences if correspondences is not None else [],
                       dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return 0.0, 0.0, grad_a, grad_b
    members_a = [np.asarray(m, dtype=np.int64) for m in members_a]
    members_b = [np.asarray(m, dtype=np.int64) for m in members_b]
    means_a = np.stack([desc_a[m].mean(axis=0) for m in members_a])
    means_b = np.stack([desc_b[m].mean(axis=0) for m in members_b])
    gmeans_a = np.zeros_like(means_a)
    gmeans_b = np.zeros_like(means_b)
    n = len(pairs)
    ia, ib = pairs[:, 0], pairs[:, 1]
    val, g = _hinge_pull(means_a[ia] - means_b[ib], cfg.delta_s)
    match = val.sum() / n
    g /= n
    np.add.at(gmeans_a, ia, g)
    np.add.at(gmeans_b, ib, -g)
    mismatch = 0.0
    if n >= 2:
        a, b = np.triu_indices(n, k=1)
        w = 1.0 / len(a)
        val, g = _hinge_push(means_a[ia[a]] - means_b[ib[b]], 2.0 * cfg.delta_d)
        mismatch = w * val.sum()
        g *= w
        np.add.at(gmeans_a, ia[a], g)
        np.add.at(gmeans_b, ib[b], -g)
    grad_a += _mean_grad_to_points(gmeans_a, members_a, len(desc_a), desc_a.shape[1])
    grad_b += _mean_grad_to_points(gmeans_b, members_b, len(desc_b), desc_b.shape[1])
    return float(match), float(mismatch), grad_a, grad_b


def discriminative_losses_grad(desc_a: np.ndarray, members_a: Sequence,
                               desc_b: Optional[np.ndarray] = None,
                               members_b: Optional[Sequence] = None,
                               correspondences: Optional[Sequence] = None,
                               cfg: LossConfig = LossConfig()):
    """The four descriptor terms and their gradients.

    Args:
        desc_a: ``(N_a, d)`` point descriptors of cloud A.
        members_a: member index arrays of the lines in A.
        desc_b, members_b: the associated cloud B, or ``None``.
        correspondences: ``(i, i')`` pairs of line indices into A and B.

    Returns:
        ``(DescriptorLosses, grad_a, grad_b)``; ``grad_b`` is ``None`` without
        a second cloud. ``same`` and ``diff`` are computed on cloud A only.
    """
    same, diff, grad_a = single_cloud_losses_grad(desc_a, members_a, cfg)
    match = mismatch = 0.0
    grad_b = None
    if desc_b is not None:
        match, mismatch, ga, grad_b = cross_cloud_losses_grad(
            desc_a, members_a, desc_b, members_b, correspondences, cfg)
        grad_a = grad_a + ga
    return DescriptorLosses(same, diff, match, mismatch), grad_a, grad_b


def discriminative_losses(groups_a: LineGroup, descriptors_a: np.ndarray,
                          groups_b: Optional[LineGroup] = None,
                          descriptors_b: Optional[np.ndarray] = None,
                          correspondences: Optional[Sequence] = None,
                          cfg: LossConfig = LossConfig()) -> DescriptorLosses:
    """Loss values for line groups over their point descriptors."""
    terms, _, _ = discriminative_losses_grad(
        descriptors_a, groups_a.members, descriptors_b,
        None if groups_b is None else groups_b.members, correspondences, cfg)
    return terms


def total_loss(seg: float, same: float, diff: float, match: float, mismatch: float,
               cfg: LossConfig = LossConfig()) -> float:
    return cfg.omega * seg + same + diff + match + mismatch
