import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarlines.features import FeatureConfig, compute_si_features, si_features_from_neighbors
from lidarlines.geometry import PointCloud, Sim3Transform, apply_transform


def literal_features(points, k):
    """Per-point loop with an exhaustive neighbor sort."""
    out = np.zeros_like(points)
    for i, p in enumerate(points):
        d = np.linalg.norm(points - p, axis=1)
        d[i] = np.inf
        nb = np.lexsort((np.arange(len(points)), d))[:k]
        num = np.zeros(3)
        den = 0.0
        for j in nb:
            num += p - points[j]
            den += np.linalg.norm(p - points[j])
        out[i] = num / den if den >= 1e-12 else 0.0
    return out


def test_single_neighbor():
    f, _ = si_features_from_neighbors(np.array([[0.0, 0, 0], [1, 0, 0]]), np.array([[1], [0]]))
    np.testing.assert_allclose(f[0], [-1, 0, 0])


def test_symmetric_neighbors_cancel():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    f, _ = si_features_from_neighbors(pts, np.array([[1, 2], [0, 2], [0, 1]]))
    np.testing.assert_allclose(f[0], 0.0)


def test_degenerate_is_zero():
    pts = np.array([[1.0, 1, 1], [1, 1, 1], [5, 5, 5]])
    f, deg = si_features_from_neighbors(pts, np.array([[1], [0], [0]]))
    assert deg.tolist() == [True, True, False]
    np.testing.assert_array_equal(f[:2], 0.0)


def test_matches_literal_loop():
    pts = np.random.default_rng(0).normal(size=(80, 3))
    f = compute_si_features(PointCloud(pts), FeatureConfig(k=20))
    np.testing.assert_allclose(f, literal_features(pts, 20), atol=1e-12)


def test_requires_more_points_than_k():
    with pytest.raises(ValueError):
        compute_si_features(PointCloud(np.random.default_rng(0).random((20, 3))), FeatureConfig(k=20))
    with pytest.raises(ValueError):
        FeatureConfig(k=0)


def test_sim3_equivariance():
    rng = np.random.default_rng(1)
    c = PointCloud(rng.normal(size=(256, 3)))
    f = compute_si_features(c)
    for _ in range(5):
        xf = Sim3Transform.random(rng)
        g = compute_si_features(apply_transform(c, xf))
        np.testing.assert_allclose(g, f @ xf.rotation.T, atol=1e-9)


seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.1, 3.0))
def test_prop_scale_translation_invariance(seed, s):
    rng = np.random.default_rng(seed)
    c = PointCloud(rng.normal(size=(60, 3)))
    xf = Sim3Transform(s, np.eye(3), rng.uniform(-10, 10, size=3))
    f = compute_si_features(c, FeatureConfig(k=8))
    g = compute_si_features(apply_transform(c, xf), FeatureConfig(k=8))
    assert np.abs(f - g).max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 12))
def test_prop_norm_at_most_one(seed, k):
    pts = np.random.default_rng(seed).normal(size=(40, 3))
    f = compute_si_features(PointCloud(pts), FeatureConfig(k=k))
    assert np.all(np.isfinite(f))
    assert np.all(np.linalg.norm(f, axis=1) <= 1 + 1e-12)
