import math

import numpy as np
import pytest

from heatflow.cloud import PointCloud, SynthSpec, synth_shape
from heatflow.diffusion import (
    DiffusionSchedule,
    ScheduleError,
    forward_diffuse,
    heat_rhs,
    implicit_euler_step,
    relax,
    rk4_step,
    substeps,
    write_trajectory,
)
from heatflow.heat import build_heat_graph

TWO = np.array([[-1.0, 0, 0], [1.0, 0, 0]])


def two_point_graph():
    return build_heat_graph(TWO, k=1, sigmas=1.0)


def rk4_gap(tau, t_final):
    """Separation of the two-point system after RK4 steps of size tau."""
    g = two_point_graph()
    z = TWO
    for _ in range(int(round(t_final / tau))):
        z = rk4_step(z, g, tau)
    return z[1, 0] - z[0, 0]


def test_heat_rhs_two_points():
    np.testing.assert_allclose(heat_rhs(TWO, two_point_graph()), [[2, 0, 0], [-2, 0, 0]])


def test_rk4_zero_step_identity():
    pts = np.random.default_rng(0).standard_normal((20, 3))
    g = build_heat_graph(pts, k=4)
    assert np.array_equal(rk4_step(pts, g, 0.0), pts)
    assert np.max(np.abs(rk4_step(pts, g, 1e-12) - pts)) < 1e-9


def test_rk4_convergence_order():
    exact = 2 * math.exp(-2.0)
    taus = [0.2, 0.1, 0.05, 0.025]
    errs = [abs(rk4_gap(t, 1.0) - exact) for t in taus]
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert min(orders) >= 3.9, orders


def test_rk4_agrees_with_closed_form():
    assert abs(rk4_gap(0.05, 1.0) - 2 * math.exp(-2.0)) < 1e-4


def test_implicit_agrees_with_closed_form():
    # literal oracle: first-order implicit Euler at tau = 0.05 within 1e-4 of e^(-2t)
    traj = forward_diffuse(TWO, DiffusionSchedule.uniform(1.0, 1, 0.05), integrator="implicit",
                           graph=two_point_graph())
    gap = traj.final.points[1, 0] - traj.final.points[0, 0]
    assert abs(gap - 2 * math.exp(-2.0)) < 1e-4


def test_implicit_two_point_contraction():
    for tau in (0.1, 0.5, 1.0, 10.0):
        z = implicit_euler_step(TWO, two_point_graph(), tau)
        assert abs((z[1, 0] - z[0, 0]) / 2.0 - 1.0 / (1.0 + 2.0 * tau)) < 1e-12


def test_implicit_maximum_principle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        pts = rng.standard_normal((40, 3)) * rng.uniform(0.1, 5)
        g = build_heat_graph(pts, k=8, sigmas=rng.uniform(0.1, 2))
        for tau in (0.1, 1.0, 10.0):
            z = implicit_euler_step(pts, g, tau)
            assert np.all(z.min(axis=0) >= pts.min(axis=0) - 1e-9)
            assert np.all(z.max(axis=0) <= pts.max(axis=0) + 1e-9)


@pytest.mark.parametrize("integrator", ["rk4", "implicit"])
def test_coincident_cloud_fixed(integrator):
    pts = np.full((12, 3), -0.75)
    traj = forward_diffuse(pts, DiffusionSchedule.uniform(2.0, 4, 0.3), integrator=integrator, k=4)
    for s in traj.states:
        assert np.array_equal(s.points, pts)


def test_zero_horizon_schedule():
    pts = np.random.default_rng(2).standard_normal((20, 3))
    traj = forward_diffuse(pts, DiffusionSchedule(np.array([0.0, 0.0]), 0.05), k=4)
    assert len(traj) == 2
    assert traj.states[0] == traj.states[1]


@pytest.mark.parametrize("integrator", ["rk4", "implicit"])
def test_variance_non_increasing(integrator):
    _, noisy = synth_shape(SynthSpec("sphere", 128, 0.02, seed=4))
    traj = forward_diffuse(noisy, DiffusionSchedule.uniform(1.0, 10, 0.05), integrator=integrator, k=16)
    var = np.array([s.points.var(axis=0) for s in traj.states])
    assert np.all(np.diff(var, axis=0) <= 1e-15)


def test_semigroup_frozen_sigma():
    pts = np.random.default_rng(5).standard_normal((60, 3))
    graph = build_heat_graph(pts, k=8, sigmas=0.6)
    a, b, tau = 0.33, 0.21, 0.05
    one = forward_diffuse(pts, DiffusionSchedule(np.array([0.0, a + b]), tau), graph=graph).final
    mid = forward_diffuse(pts, DiffusionSchedule(np.array([0.0, a]), tau), graph=graph).final
    two = forward_diffuse(mid, DiffusionSchedule(np.array([0.0, b]), tau), graph=graph).final
    assert np.max(np.abs(one.points - two.points)) < 1e-5


def test_forward_diffuse_deterministic():
    pts = np.random.default_rng(6).standard_normal((50, 3))
    s = DiffusionSchedule.uniform(0.5, 5, 0.05)
    a, b = forward_diffuse(pts, s, k=8), forward_diffuse(pts, s, k=8)
    assert all(x == y for x, y in zip(a.states, b.states))


def test_scale_function_is_used():
    pts = np.random.default_rng(7).standard_normal((40, 3))
    s = DiffusionSchedule.uniform(0.5, 2, 0.1)
    base = forward_diffuse(pts, s, k=8).final.points
    tiny = forward_diffuse(pts, s, k=8, scale_fn=lambda f, t: np.full(len(f), 0.05)).final.points
    assert not np.allclose(base, tiny)


def test_substeps_cover_interval():
    hs = substeps(0.0, 0.33, 0.05)
    assert len(hs) == 7 and abs(sum(hs) - 0.33) < 1e-15
    assert substeps(0.2, 0.2, 0.05) == []
    assert substeps(0.0, 0.3, 0.1) == [0.1, 0.1, 0.1] or abs(sum(substeps(0.0, 0.3, 0.1)) - 0.3) < 1e-15


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        DiffusionSchedule(np.array([0.1, 0.2]), 0.05)
    with pytest.raises(ScheduleError):
        DiffusionSchedule(np.array([0.0, 0.3, 0.2]), 0.05)
    with pytest.raises(ScheduleError):
        DiffusionSchedule(np.array([0.0, 1.0]), 0.6)
    with pytest.raises(ScheduleError):
        DiffusionSchedule(np.array([0.0, 1.0]), 1e-5)
    with pytest.raises(ValueError):
        forward_diffuse(TWO, DiffusionSchedule.uniform(1, 1), integrator="euler", k=1)


def test_relax_identity_and_std():
    pts = np.random.default_rng(8).standard_normal((10_000, 3))
    assert np.array_equal(relax(pts, 0.0, 1), pts)
    out = relax(PointCloud(pts), 0.01, 1)
    assert abs((out.points - pts).std() / 0.01 - 1) < 0.05
    assert relax(PointCloud(pts), 0.01, 1) == out
    assert relax(PointCloud(pts), 0.01, 2) != out
    with pytest.raises(ValueError):
        relax(pts, -0.1, 0)


def test_write_trajectory(tmp_path):
    pts = np.random.default_rng(9).standard_normal((30, 3))
    traj = forward_diffuse(pts, DiffusionSchedule.uniform(0.4, 3, 0.05), k=6)
    paths = write_trajectory(traj, tmp_path)
    assert [p.name for p in paths] == ["state_000.xyz", "state_001.xyz", "state_002.xyz", "state_003.xyz"]
    lines = (tmp_path / "schedule.txt").read_text().splitlines()
    assert lines[0] == "S 3" and lines[1] == "tau 0.05"
    assert len(lines[2].split()) == 5
