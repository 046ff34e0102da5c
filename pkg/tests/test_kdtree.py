import numpy as np
import pytest

from heatflow.kdtree import (
    InsufficientPointsError,
    brute_force_knn,
    build_kdtree,
    knn,
    knn_graph,
    nearest,
)


def test_single_point_tree():
    tree = build_kdtree(np.zeros((1, 3)))
    assert len(tree.leaves()) == 1
    with pytest.raises(InsufficientPointsError):
        knn(tree, 0, 1)


def test_self_is_nearest_at_zero():
    pts = np.random.default_rng(0).uniform(size=(1000, 3))
    idx, d2 = nearest(build_kdtree(pts), pts)
    np.testing.assert_array_equal(idx, np.arange(1000))
    assert np.all(d2 == 0)


def test_duplicates_both_returned():
    pts = np.array([[0, 0, 0], [1, 1, 1], [1, 1, 1], [5, 5, 5]], dtype=float)
    tree = build_kdtree(pts)
    assert set(knn(tree, 0, 2)) == {1, 2}
    assert knn(tree, 1, 1).tolist() == [2]
    assert knn(tree, 2, 1).tolist() == [1]


def test_tie_break_lower_index():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    assert knn(build_kdtree(pts), 1, 1).tolist() == [0]


def test_k_equals_n_minus_one():
    pts = np.random.default_rng(1).standard_normal((20, 3))
    tree = build_kdtree(pts)
    for i in (0, 7, 19):
        assert sorted(knn(tree, i, 19)) == [j for j in range(20) if j != i]


def test_matches_brute_force_200():
    pts = np.random.default_rng(2).uniform(size=(200, 3))
    tree = build_kdtree(pts)
    for i in range(200):
        np.testing.assert_array_equal(knn(tree, i, 8), brute_force_knn(pts, i, 8))


def test_matches_scipy():
    cKDTree = pytest.importorskip("scipy.spatial").cKDTree
    pts = np.random.default_rng(3).standard_normal((300, 3))
    ours = knn_graph(pts, 6)
    d, ref = cKDTree(pts).query(pts, k=7)
    ref_d = d[:, 1:]
    ours_d = np.linalg.norm(pts[ours] - pts[:, None], axis=2)
    np.testing.assert_allclose(ours_d, ref_d, atol=1e-12)


def test_grid_with_many_ties():
    g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    tree = build_kdtree(g)
    for i in range(0, len(g), 7):
        for k in (1, 6, 18):
            np.testing.assert_array_equal(knn(tree, i, k), brute_force_knn(g, i, k))


def test_all_coincident():
    pts = np.ones((40, 3))
    tree = build_kdtree(pts)
    assert knn(tree, 3, 5).tolist() == [0, 1, 2, 4, 5]


def test_bad_arguments():
    tree = build_kdtree(np.random.default_rng(0).standard_normal((5, 3)))
    with pytest.raises(IndexError):
        knn(tree, 5, 1)
    with pytest.raises(ValueError):
        knn(tree, 0, 0)
    with pytest.raises(InsufficientPointsError):
        knn_graph(np.zeros((3, 3)), 3)
