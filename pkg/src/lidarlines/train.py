"""Training loops for segmentation pretraining and joint segmentation +
description training."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .losses import (LossConfig, cross_cloud_losses_grad, seg_loss_grad,
                     single_cloud_losses_grad, total_loss)
from .net import Adam, MicroNet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 0


@dataclass
class Sample:
    """A cloud with per-point labels and cached network inputs."""

    points: np.ndarray
    labels: np.ndarray
    prepared: Optional[dict] = None


@dataclass
class PairSample:
    """Two clouds of the same place with line members and correspondences."""

    a: Sample
    b: Sample
    members_a: List[np.ndarray]
    members_b: List[np.ndarray]
    correspondences: np.ndarray


def _accumulate(total: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], w: float):
    for k, g in grads.items():
        if k in total:
            total[k] += w * g
        else:
            total[k] = w * g


def _prepared(net: MicroNet, s: Sample) -> dict:
    if s.prepared is None:
        s.prepared = net.prepare(s.points)
    return s.prepared


def accuracy(net: MicroNet, samples: Sequence[Sample]) -> float:
    """Point-weighted accuracy over all samples."""
    correct = total = 0
    for s in samples:
        pred = net.predict(s.points, _prepared(net, s))
        correct += int((pred == s.labels).sum())
        total += len(s.labels)
    return correct / max(total, 1)


def train_segmentation(net: MicroNet, samples: Sequence[Sample], cfg: TrainConfig = TrainConfig(),
                       on_epoch: Optional[Callable[[int, float], None]] = None) -> List[float]:
    """Cross-entropy training; returns the mean loss of each epoch."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads: Dict[str, np.ndarray] = {}
            for i in batch:
                s = samples[i]
                res = net.forward(prepared=_prepared(net, s))
                loss, d_logits = seg_loss_grad(res.seg_logits, s.labels)
                _accumulate(grads, net.backward(res, d_logits=d_logits), 1.0 / len(batch))
                losses.append(loss)
            opt.step(net.params, grads, epoch)
        history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history


def joint_step_loss(net: MicroNet, pair: PairSample, loss_cfg: LossConfig):
    """Total loss of one pair and its parameter gradients.

    Segmentation, ``same`` and ``diff`` are averaged over the two clouds;
    ``match`` and ``mismatch`` are taken once per pair.
    """
    ra = net.forward(prepared=_prepared(net, pair.a))
    rb = net.forward(prepared=_prepared(net, pair.b))
    seg_a, dla = seg_loss_grad(ra.seg_logits, pair.a.labels)
    seg_b, dlb = seg_loss_grad(rb.seg_logits, pair.b.labels)
    same_a, diff_a, ga = single_cloud_losses_grad(ra.descriptors, pair.members_a, loss_cfg)
    same_b, diff_b, gb = single_cloud_losses_grad(rb.descriptors, pair.members_b, loss_cfg)
    match, mismatch, gxa, gxb = cross_cloud_losses_grad(
        ra.descriptors, pair.members_a, rb.descriptors, pair.members_b,
        pair.correspondences, loss_cfg)
    seg = 0.5 * (seg_a + seg_b)
    total = total_loss(seg, 0.5 * (same_a + same_b), 0.5 * (diff_a + diff_b),
                       match, mismatch, loss_cfg)
    half_w = 0.5 * loss_cfg.omega
    grads: Dict[str, np.ndarray] = {}
    _accumulate(grads, net.backward(ra, half_w * dla, 0.5 * ga + gxa), 1.0)
    _accumulate(grads, net.backward(rb, half_w * dlb, 0.5 * gb + gxb), 1.0)
    return total, grads


def train_joint(net: MicroNet, pairs: Sequence[PairSample], cfg: TrainConfig = TrainConfig(),
                loss_cfg: LossConfig = LossConfig()) -> List[float]:
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads: Dict[str, np.ndarray] = {}
            for i in batch:
                loss, g = joint_step_loss(net, pairs[i], loss_cfg)
                _accumulate(grads, g, 1.0 / len(batch))
                losses.append(loss)
            opt.step(net.params, grads, epoch)
        history.append(float(np.mean(losses)))
        log.info("epoch %d joint loss %.4f", epoch, history[-1])
    return history
