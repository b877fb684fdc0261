import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarlines.losses import (LineGroup, LossConfig, discriminative_losses,
                               discriminative_losses_grad, seg_loss, seg_loss_grad, softmax,
                               total_loss)
from oracles import literal_losses, literal_seg_loss


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_instance(rng, n_lines=3, max_pts=5, d=4):
    sizes = rng.integers(1, max_pts + 1, size=n_lines)
    n = int(sizes.sum()) + 2
    perm = rng.permutation(n)
    members, start = [], 0
    for s in sizes:
        members.append(perm[start:start + s])
        start += s
    return unit_rows(rng.normal(size=(n, d))), members


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(delta_s=1.0, delta_d=0.5)
    with pytest.raises(ValueError):
        LossConfig(omega=0)


def test_group_validation_and_means():
    d = np.eye(3)
    g = LineGroup.from_descriptors(d, [[0, 1], [2]])
    np.testing.assert_allclose(g.means, [[0.5, 0.5, 0], [0, 0, 1]], atol=1e-12)
    with pytest.raises(ValueError):
        LineGroup.from_descriptors(d, [[0, 1], [1]])
    with pytest.raises(ValueError):
        LineGroup.from_descriptors(d, [[0], []])


def test_seg_loss_examples():
    assert seg_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == pytest.approx(0, abs=1e-10)
    assert seg_loss(np.full((4, 2), 0.5), [0, 1, 1, 0]) == pytest.approx(np.log(2))


def test_seg_loss_matches_direct_sum():
    rng = np.random.default_rng(0)
    probs = softmax(rng.normal(size=(30, 2)))
    labels = rng.integers(0, 2, 30)
    assert seg_loss(probs, labels) == pytest.approx(literal_seg_loss(probs, labels), abs=1e-12)


def test_seg_loss_grad_finite_difference():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 2))
    labels = rng.integers(0, 2, 6)
    _, g = seg_loss_grad(logits, labels)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (seg_loss(softmax(up), labels) - seg_loss(softmax(dn), labels)) / (2 * h)
        assert g[idx] == pytest.approx(fd, abs=1e-8)


def test_same_zero_when_members_equal_mean():
    d = unit_rows(np.array([[1.0, 1, 0, 0]] * 3 + [[0, 0, 1.0, 0]] * 2))
    g = LineGroup.from_descriptors(d, [[0, 1, 2], [3, 4]])
    assert discriminative_losses(g, d).same == 0.0


def test_diff_hinge_arithmetic():
    cfg = LossConfig(delta_s=0.1, delta_d=1.0)
    d = np.array([[0.0, 0.0], [0.0, 2.0 * cfg.delta_d + 1]])
    far = discriminative_losses(LineGroup.from_descriptors(d, [[0], [1]]), d, cfg=cfg)
    assert far.diff == 0.0
    d = np.array([[0.0, 0.0], [0.0, 2.0 * cfg.delta_d - 0.2]])
    near = discriminative_losses(LineGroup.from_descriptors(d, [[0], [1]]), d, cfg=cfg)
    assert near.diff == pytest.approx(0.04)


def test_degenerate_cases_are_zero():
    d = unit_rows(np.random.default_rng(2).normal(size=(4, 3)))
    one = LineGroup.from_descriptors(d, [[0, 1]])
    t = discriminative_losses(one, d)
    assert t.diff == 0.0 and t.match == 0.0 and t.mismatch == 0.0
    t = discriminative_losses(one, d, one, d, correspondences=[])
    assert t.match == 0.0 and t.mismatch == 0.0


def test_four_terms_match_literal_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        da, ma = random_instance(rng)
        db, mb = random_instance(rng)
        corr = [(0, 1), (1, 0), (2, 2)]
        got = discriminative_losses(LineGroup.from_descriptors(da, ma), da,
                                    LineGroup.from_descriptors(db, mb), db, corr)
        np.testing.assert_allclose(got, literal_losses(da, ma, db, mb, corr), atol=1e-12)


def test_descriptor_gradients_finite_difference():
    rng = np.random.default_rng(4)
    da, ma = random_instance(rng)
    db, mb = random_instance(rng)
    corr = [(0, 0), (1, 2), (2, 1)]
    cfg = LossConfig(delta_s=0.05, delta_d=0.8)

    def f(a, b):
        return sum(literal_losses(a, ma, b, mb, corr, cfg))

    _, ga, gb = discriminative_losses_grad(da, ma, db, mb, corr, cfg)
    h = 1e-7
    for desc, grad, which in ((da, ga, 0), (db, gb, 1)):
        for idx in np.ndindex(desc.shape):
            up, dn = desc.copy(), desc.copy()
            up[idx] += h
            dn[idx] -= h
            args_up = (up, db) if which == 0 else (da, up)
            args_dn = (dn, db) if which == 0 else (da, dn)
            fd = (f(*args_up) - f(*args_dn)) / (2 * h)
            assert grad[idx] == pytest.approx(fd, abs=1e-6)


def test_total_loss():
    assert total_loss(0, 0, 0, 0, 0) == 0
    assert total_loss(1, 0, 0, 0, 0, LossConfig(omega=2.0)) == 2
    assert total_loss(0.3, 0.1, 0.2, 0.4, 0.5) == pytest.approx(2 * 0.3 + 1.2)


seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_prop_terms_nonnegative_and_invariant(seed):
    rng = np.random.default_rng(seed)
    da, ma = random_instance(rng)
    g = LineGroup.from_descriptors(da, ma)
    base = discriminative_losses(g, da, g, da, [(0, 0), (1, 1)])
    assert min(base) >= 0
    # permuting the points within a line leaves L_same unchanged
    shuffled = da.copy()
    for m in ma:
        shuffled[m] = da[rng.permutation(m)]
    assert discriminative_losses(LineGroup.from_descriptors(shuffled, ma), shuffled).same == \
        pytest.approx(base.same, abs=1e-12)
    # relabeling lines leaves L_diff unchanged
    order = rng.permutation(len(ma))
    relabeled = [ma[i] for i in order]
    assert discriminative_losses(LineGroup.from_descriptors(da, relabeled), da).diff == \
        pytest.approx(base.diff, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_prop_inactive_hinge_dead_zone(seed):
    rng = np.random.default_rng(seed)
    cfg = LossConfig(delta_s=0.5, delta_d=1.0)
    # one tight line: every member within delta_s of the mean in L1
    center = unit_rows(rng.normal(size=(1, 4)))[0]
    d = center + rng.uniform(-0.02, 0.02, size=(5, 4))
    members = [np.arange(5)]
    before = discriminative_losses(LineGroup.from_descriptors(d, members), d, cfg=cfg).same
    assert before == 0.0
    bumped = d.copy()
    bumped[0] += rng.uniform(-0.01, 0.01, size=4)
    after = discriminative_losses(LineGroup.from_descriptors(bumped, members), bumped, cfg=cfg).same
    assert after == 0.0
