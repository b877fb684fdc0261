import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarlines.losses import LossConfig, seg_loss_grad
from lidarlines.net import (Adam, MicroNet, NetConfig, adam_step, checkpoint_bytes,
                            checkpoint_from_bytes, edgeconv_forward, skip_gather,
                            skip_gather_all)
from lidarlines.train import Sample, TrainConfig, train_segmentation
from oracles import (PairProblem, analytic_gradients, brute_knn, brute_skip, dense_edgeconv,
                     finite_difference_check)

TOY = dict(k=4, stride=1, channels=4, d=4)
# instances whose +-1e-3 perturbations keep every max/ReLU/hinge/sign choice
# fixed, so central differences are a valid oracle for the derivative
SMOOTH_SEED = {False: 6, True: 91}


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(k=0)
    with pytest.raises(ValueError):
        NetConfig(stride=0)


def test_skip_gather_stride_one_is_knn():
    x = np.random.default_rng(0).normal(size=(40, 3))
    for i in range(0, 40, 7):
        np.testing.assert_array_equal(skip_gather(x, i, 5, 1), brute_knn(x, i, 5))


def test_skip_gather_colinear_example():
    x = np.zeros((13, 3))
    x[:, 0] = np.arange(13)  # query at 0, points at 1..12
    got = skip_gather(x, 0, 3, 2)
    assert sorted(x[got, 0].tolist()) == [2, 4, 6]


def test_skip_gather_matches_sort_oracle():
    x = np.random.default_rng(1).normal(size=(120, 5))
    table = skip_gather_all(x, 6, 4)
    for i in range(120):
        np.testing.assert_array_equal(table[i], brute_skip(x, i, 6, 4))
        np.testing.assert_array_equal(skip_gather(x, i, 6, 4), table[i])


def test_skip_gather_all_with_ties():
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 2, indexing="ij"), -1).reshape(-1, 2)
    table = skip_gather_all(g, 3, 2)
    for i in range(len(g)):
        np.testing.assert_array_equal(table[i], brute_skip(g, i, 3, 2))


def test_skip_gather_requires_enough_points():
    x = np.zeros((12, 3))
    with pytest.raises(ValueError):
        skip_gather(x, 0, 3, 4)
    with pytest.raises(ValueError):
        skip_gather_all(x, 3, 4)


def test_edgeconv_zero_weights():
    x = np.random.default_rng(2).normal(size=(8, 4))
    nb = np.random.default_rng(3).integers(0, 8, size=(8, 3))
    out = edgeconv_forward(np.zeros((8, 5)), np.zeros(5), x, nb)
    np.testing.assert_array_equal(out, 0.0)


def test_edgeconv_center_selection_is_identity():
    x = np.abs(np.random.default_rng(4).normal(size=(8, 4)))
    w = np.vstack([np.eye(4), np.zeros((4, 4))])
    nb = np.random.default_rng(5).integers(0, 8, size=(8, 3))
    np.testing.assert_allclose(edgeconv_forward(w, np.zeros(4), x, nb), x, atol=1e-12)


def test_edgeconv_matches_dense_loop():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(8, 4))
    w, b = rng.normal(size=(8, 4)), rng.normal(size=4)
    nb = np.array([rng.choice(8, 3, replace=False) for _ in range(8)])
    np.testing.assert_allclose(edgeconv_forward(w, b, x, nb), dense_edgeconv(w, b, x, nb),
                               atol=1e-12)


@pytest.mark.parametrize("si", [False, True])
def test_forward_postconditions(si):
    net = MicroNet(NetConfig(k=8, stride=2, channels=6, d=5, scale_invariant_first_layer=si))
    res = net.forward(np.random.default_rng(7).normal(size=(64, 3)))
    assert res.seg_logits.shape == (64, 2) and res.descriptors.shape == (64, 5)
    np.testing.assert_allclose(res.seg_probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(res.descriptors, axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("si", [False, True])
def test_forward_permutation_equivariant(si):
    net = MicroNet(NetConfig(k=6, stride=2, channels=6, d=4, scale_invariant_first_layer=si),
                   dtype=np.float64)
    pts = np.random.default_rng(8).normal(size=(50, 3))
    perm = np.random.default_rng(9).permutation(50)
    a = net.forward(pts)
    b = net.forward(pts[perm])
    np.testing.assert_allclose(b.seg_probs, a.seg_probs[perm], atol=1e-10)
    np.testing.assert_allclose(b.descriptors, a.descriptors[perm], atol=1e-10)


def test_scale_invariant_forward():
    net = MicroNet(NetConfig(k=8, stride=2, scale_invariant_first_layer=True))
    pts = np.random.default_rng(10).normal(size=(100, 3))
    np.testing.assert_allclose(net.forward(2 * pts).seg_probs, net.forward(pts).seg_probs,
                               atol=1e-5)


def test_backward_zero_upstream():
    net = MicroNet(NetConfig(**TOY), dtype=np.float64)
    grads = net.backward(net.forward(np.random.default_rng(11).normal(size=(32, 3))))
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


def test_backward_dead_descriptor_path():
    net = MicroNet(NetConfig(**TOY), dtype=np.float64)
    res = net.forward(np.random.default_rng(12).normal(size=(32, 3)))
    _, d_logits = seg_loss_grad(res.seg_logits, np.arange(32) % 2)
    grads = net.backward(res, d_logits=d_logits)
    for name in MicroNet.DESC:
        np.testing.assert_array_equal(grads[f"{name}.weight"], 0.0)
        np.testing.assert_array_equal(grads[f"{name}.bias"], 0.0)
    assert np.abs(grads["edge1.weight"]).max() > 0


def _smooth_problem(si):
    seed = SMOOTH_SEED[si]
    net = MicroNet(NetConfig(**TOY, scale_invariant_first_layer=si), seed=seed)
    net = net.astype(np.float64)
    prob = PairProblem(seed)
    prob.points_a = prob.points_a.astype(np.float32).astype(np.float64)
    prob.points_b = prob.points_b.astype(np.float32).astype(np.float64)
    prob.freeze_graphs(net)
    return net, prob


def test_gradient_check_step_1e3():
    net, prob = _smooth_problem(False)
    _, grads = analytic_gradients(net, prob)
    worst, kinks, count = finite_difference_check(net, prob, grads, 1e-3)
    assert count == net.n_parameters()
    assert kinks == 0
    assert worst < 1e-4


@pytest.mark.parametrize("si", [False, True])
def test_gradient_check_extrapolated(si):
    net, prob = _smooth_problem(si)
    _, grads = analytic_gradients(net, prob)
    worst, kinks, count = finite_difference_check(net, prob, grads, 1e-3, richardson=True)
    assert count == net.n_parameters()
    assert kinks == 0
    assert worst < 1e-4


def test_gradient_check_cost_matches_training_objective():
    # the oracle objective and the training objective agree on the value
    net = MicroNet(NetConfig(**TOY), seed=1, dtype=np.float64)
    prob = PairProblem(1)
    total, _ = analytic_gradients(net, prob)
    assert prob.loss(net) == pytest.approx(total, rel=1e-12)


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p)
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_magnitude():
    p = {"w": np.array([0.5])}
    opt = Adam(p, lr=0.001)
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(0.5 - 0.001, abs=1e-9)


def test_adam_schedule():
    opt = Adam({"w": np.zeros(1)}, lr=0.001)
    assert opt.lr_at(14) == 0.001
    assert opt.lr_at(15) == 0.0005
    assert opt.lr_at(30) == pytest.approx(0.00025)


def test_adam_step_on_net():
    net = MicroNet(NetConfig(**TOY))
    before = {k: v.copy() for k, v in net.params.items()}
    grads = {k: np.ones_like(v) for k, v in net.params.items()}
    adam_step(net, grads, Adam(net.params), epoch=0)
    for k in before:
        np.testing.assert_allclose(before[k] - net.params[k], 0.001, rtol=1e-3)


def test_checkpoint_round_trip():
    net = MicroNet(NetConfig(k=5, stride=2, channels=3, d=7, scale_invariant_first_layer=True),
                   seed=3)
    back = checkpoint_from_bytes(checkpoint_bytes(net, {"epoch": 4}))
    assert back.cfg == net.cfg
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])


def test_checkpoint_bad_magic_and_truncation():
    data = checkpoint_bytes(MicroNet(NetConfig(**TOY)))
    with pytest.raises(ValueError, match="magic"):
        checkpoint_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        checkpoint_from_bytes(data + b"\0\0\0\0")


def test_training_is_deterministic():
    rng = np.random.default_rng(13)
    samples = [Sample(rng.normal(size=(40, 3)), rng.integers(0, 2, 40)) for _ in range(3)]

    def run():
        net = MicroNet(NetConfig(**TOY), seed=2)
        hist = train_segmentation(net, [Sample(s.points, s.labels) for s in samples],
                                  TrainConfig(epochs=3, batch_size=2))
        return hist, net.params

    h1, p1 = run()
    h2, p2 = run()
    assert h1 == h2
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 5))
def test_prop_skip_gather_oracle(seed, k, stride):
    rng = np.random.default_rng(seed)
    n = stride * k + int(rng.integers(1, 20))
    x = np.round(rng.normal(size=(n, 3)), 1)  # rounding creates ties
    table = skip_gather_all(x, k, stride)
    for i in range(n):
        np.testing.assert_array_equal(table[i], brute_skip(x, i, k, stride))
