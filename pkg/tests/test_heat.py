import math

import numpy as np
import pytest

from heatflow.autodiff import Tensor, grad_check
from heatflow.heat import (
    SIGMA_MIN,
    ScaleDomainError,
    apply_laplacian,
    build_heat_graph,
    heat_weights,
    laplacian,
)


def test_weight_at_zero_distance():
    g = build_heat_graph(np.zeros((2, 3)), k=1, sigmas=1.0)
    np.testing.assert_allclose(g.weights, 0.398942, atol=1e-6)
    assert abs(g.weights[0, 0] - 1 / math.sqrt(2 * math.pi)) < 1e-9


def test_weight_at_one_sigma():
    g = build_heat_graph(np.array([[0, 0, 0], [1.0, 0, 0]]), k=1, sigmas=1.0)
    assert abs(g.weights[0, 0] - 0.241971) < 1e-6
    assert abs(g.weights[0, 0] - math.exp(-0.5) / math.sqrt(2 * math.pi)) < 1e-9


def test_doubled_sigma_halves_weight():
    g = build_heat_graph(np.zeros((2, 3)), k=1, sigmas=2.0)
    assert abs(g.weights[0, 0] - 0.199471) < 1e-6
    assert abs(g.weights[0, 0] - 0.5 / math.sqrt(2 * math.pi)) < 1e-12


def test_rows_are_stochastic():
    pts = np.random.default_rng(0).standard_normal((50, 3))
    g = build_heat_graph(pts, k=8, sigmas=0.3)
    np.testing.assert_allclose(g.probs.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(g.transition_matrix().sum(axis=1), 1.0, atol=1e-12)


def test_tiny_sigma_does_not_underflow():
    pts = np.random.default_rng(1).standard_normal((30, 3)) * 10
    g = build_heat_graph(pts, k=4, sigmas=SIGMA_MIN)
    assert np.all(np.isfinite(apply_laplacian(g, pts)))


def test_sigma_below_floor_rejected():
    with pytest.raises(ScaleDomainError):
        build_heat_graph(np.random.default_rng(0).standard_normal((5, 3)), k=2, sigmas=1e-4)


def test_two_point_velocity():
    pts = np.array([[-1.0, 0, 0], [1.0, 0, 0]])
    for s in (0.1, 1.0, 10.0):
        g = build_heat_graph(pts, k=1, sigmas=s)
        np.testing.assert_allclose(apply_laplacian(g, pts), [[2, 0, 0], [-2, 0, 0]], atol=1e-12)


def test_triangle_points_to_centroid():
    a = np.arange(3) * 2 * np.pi / 3
    pts = np.stack([np.cos(a), np.sin(a), np.zeros(3)], axis=1)
    v = apply_laplacian(build_heat_graph(pts, k=2, sigmas=0.7), pts)
    c = pts.mean(axis=0)
    mags = np.linalg.norm(v, axis=1)
    np.testing.assert_allclose(mags, mags[0], atol=1e-12)
    for i in range(3):
        d = c - pts[i]
        np.testing.assert_allclose(v[i] / mags[i], d / np.linalg.norm(d), atol=1e-12)


def test_coincident_zero_field():
    pts = np.full((10, 3), 2.5)
    assert np.all(apply_laplacian(build_heat_graph(pts, k=4), pts) == 0)


def test_tensor_laplacian_matches_numpy():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((40, 3))
    sig = rng.uniform(0.2, 1.0, 40)
    g = build_heat_graph(pts, k=6, sigmas=sig)
    out = laplacian(Tensor(pts), g.neighbors, Tensor(sig)).value
    np.testing.assert_allclose(out, apply_laplacian(g, pts), atol=1e-12)


def test_heat_weights_match_numpy_and_gradcheck():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((20, 3))
    g = build_heat_graph(pts, k=4, sigmas=0.8)
    w = heat_weights(Tensor(pts), g.neighbors, Tensor(np.full(20, 0.8))).value
    np.testing.assert_allclose(w, g.weights, atol=1e-14)
    coef = rng.standard_normal((20, 4))
    err = grad_check(lambda s: (heat_weights(Tensor(pts), g.neighbors, s) * coef).sum(), rng.uniform(0.5, 1.5, 20))
    assert err < 1e-4


def test_laplacian_gradcheck_positions():
    rng = np.random.default_rng(6)
    pts = rng.standard_normal((15, 3))
    nbr = build_heat_graph(pts, k=4).neighbors
    coef = rng.standard_normal((15, 3))
    sig = Tensor(np.full(15, 0.9))
    assert grad_check(lambda z: (laplacian(z, nbr, sig) * coef).sum(), pts) < 1e-4
