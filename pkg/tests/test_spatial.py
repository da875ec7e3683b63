"""Grid KNN exactness against brute force."""

import numpy as np
import pytest

from matchloc.spatial import GridIndex, knn_query


def brute_force_knn(points, queries, k):
    d = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    order = np.lexsort((np.broadcast_to(np.arange(len(points)), d.shape), d),
                       axis=1)[:, :k]
    return order, np.sqrt(np.take_along_axis(d, order, axis=1))


def test_query_at_indexed_point():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    idx, dist = knn_query(GridIndex(pts), pts[17:18], 1)
    assert idx[0, 0] == 17 and dist[0, 0] == 0.0


def test_k_equals_point_count_sorted():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(40, 3))
    q = rng.normal(size=(3, 3))
    gi, gd = knn_query(GridIndex(pts), q, 40)
    bi, bd = brute_force_knn(pts, q, 40)
    assert np.array_equal(gi, bi)
    assert np.all(np.diff(gd, axis=1) >= 0)


@pytest.mark.parametrize("trial", range(12))
def test_matches_brute_force(trial):
    rng = np.random.default_rng(100 + trial)
    n = int(rng.integers(5, 1200))
    pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)
    if trial % 3 == 0:
        pts[:, 2] = 0.0          # planar
    if trial % 4 == 0:
        pts = np.round(pts, 1)   # duplicates
    q = rng.normal(size=(int(rng.integers(1, 120)), 3)) * rng.uniform(0.1, 12)
    k = int(rng.integers(1, min(n, 10) + 1))
    gi, gd = knn_query(GridIndex(pts), q, k)
    bi, bd = brute_force_knn(pts, q, k)
    assert np.array_equal(gi, bi)
    assert np.allclose(gd, bd, atol=1e-12)


def test_exact_ties_resolved_by_index():
    base = np.random.default_rng(2).normal(size=(20, 3))
    pts = np.repeat(base, 3, axis=0)  # every point triplicated
    gi, gd = knn_query(GridIndex(pts), base[5:6], 3)
    assert np.array_equal(gi[0], [15, 16, 17])
    assert np.allclose(gd[0], 0.0)


def test_far_query_exact():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (500, 3))
    q = np.array([[40.0, -25.0, 60.0]])
    gi, _ = knn_query(GridIndex(pts), q, 4)
    bi, _ = brute_force_knn(pts, q, 4)
    assert np.array_equal(gi, bi)


def test_invalid_k_raises():
    pts = np.zeros((5, 3))
    with pytest.raises(ValueError):
        knn_query(GridIndex(pts), np.zeros((1, 3)), 6)
    with pytest.raises(ValueError):
        knn_query(GridIndex(pts), np.zeros((1, 3)), 0)


def test_empty_points_rejected():
    with pytest.raises(ValueError):
        GridIndex(np.zeros((0, 3)))
