"""Forward heat diffusion of point positions: RK4, implicit Euler, relaxation noise.

The graph topology is frozen from the input positions of a run; kernel
weights are re-evaluated from the current positions at every right-hand-side
evaluation, with scales ``sigma_i(t)`` from an optional scale function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import NormalizeTransform, PointCloud, write_xyz
from .heat import (
    DEFAULT_K,
    SIGMA_MIN,
    HeatGraph,
    apply_laplacian,
    build_heat_graph,
    laplacian,
    mean_neighbor_distance,
)

TAU_MIN = 1e-4
TAU_MAX = 0.5
INTEGRATORS = ("rk4", "implicit")

ScaleFn = Callable[[np.ndarray, float], np.ndarray]


class InstabilityError(FloatingPointError):
    def __init__(self, message: str, tau: float | None = None, step: int | None = None):
        self.tau = tau
        self.step = step
        super().__init__(f"{message} (tau={tau}, step={step})")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Grid times 0 = t_0 < t_1 < ... < t_S and the integrator step size tau."""

    times: np.ndarray
    tau: float

    def __post_init__(self):
        t = np.array(self.times, dtype=np.float64)
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or len(t) < 2:
            raise ScheduleError("a schedule needs at least two grid times")
        if t[0] != 0.0:
            raise ScheduleError(f"schedule must start at t_0 = 0, got {t[0]}")
        if np.any(np.diff(t) < 0):
            raise ScheduleError("grid times must be increasing")
        if not TAU_MIN <= self.tau <= TAU_MAX:
            raise ScheduleError(f"tau={self.tau} outside [{TAU_MIN}, {TAU_MAX}]")

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    @classmethod
    def uniform(cls, t_final: float, steps: int, tau: float = 0.05) -> "DiffusionSchedule":
        return cls(np.linspace(0.0, t_final, steps + 1), tau)


@dataclass
class Trajectory:
    states: list[PointCloud]
    schedule: DiffusionSchedule
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self) -> PointCloud:
        return self.states[-1]


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64)


# -- differentiable core -----------------------------------------------------


def rk4_tensor(z: Tensor, neighbors: np.ndarray, sigma_at, t, h) -> Tensor:
    """One classical RK4 step of dz/dt = Lap(z). ``sigma_at(t)`` gives (N,) scales."""
    half = h * 0.5
    k1 = laplacian(z, neighbors, sigma_at(t))
    k2 = laplacian(z + half * k1, neighbors, sigma_at(t + half))
    k3 = laplacian(z + half * k2, neighbors, sigma_at(t + half))
    k4 = laplacian(z + h * k3, neighbors, sigma_at(t + h))
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def substeps(t_a, t_b, tau) -> list:
    """Step sizes covering [t_a, t_b]: whole steps of tau, then the remainder.

    Works on floats or Tensors; the remainder is ``(t_b - t_a) - m * tau`` so
    gradients reach both the grid times and tau. Remainders below 1e-12
    (relative) are dropped.
    """
    span = _value(t_b) - _value(t_a)
    tv = _value(tau)
    m = int(math.floor(span / tv)) if span > 0 else 0
    out = [tau] * m
    rem_value = span - m * tv
    if rem_value > 1e-12 * max(1.0, span):
        out.append((t_b - t_a) - m * tau if m else (t_b - t_a))
    return out


def _value(x) -> float:
    return float(x.value) if isinstance(x, Tensor) else float(x)


def diffuse_tensor(z0: Tensor, times, tau, neighbors: np.ndarray, sigma_at) -> list[Tensor]:
    """RK4 states at every grid time; ``times`` may hold Tensors (learned schedule)."""
    states = [z0]
    z = z0
    step = 0
    for s in range(1, len(times)):
        t = times[s - 1]
        for h in substeps(times[s - 1], times[s], tau):
            z = rk4_tensor(z, neighbors, sigma_at, t, h)
            t = t + h
            step += 1
            if not np.all(np.isfinite(z.value)):
                raise InstabilityError("non-finite state during RK4", _value(tau), step)
        states.append(z)
    return states


# -- numpy API ---------------------------------------------------------------


def heat_rhs(positions, graph: HeatGraph) -> np.ndarray:
    """dz/dt at ``positions`` on the frozen edges of ``graph``."""
    pts = _points(positions)
    return apply_laplacian(graph.reweighted(pts), pts)


def _constant_sigmas(graph: HeatGraph):
    s = Tensor(graph.sigmas)
    return lambda t: s


def _sigma_fn(graph: HeatGraph, scale_fn: ScaleFn | None, features: np.ndarray | None):
    if scale_fn is None:
        return _constant_sigmas(graph)
    feats = features if features is not None else np.zeros(graph.n)
    return lambda t: Tensor(scale_fn(feats, _value(t)))


def rk4_step(
    positions,
    graph: HeatGraph,
    tau: float,
    scale_fn: ScaleFn | None = None,
    t: float = 0.0,
    features: np.ndarray | None = None,
    step_index: int = 0,
) -> PointCloud | np.ndarray:
    """z + (tau/6)(k1 + 2 k2 + 2 k3 + k4) on the frozen edges of ``graph``."""
    if not 0.0 <= tau <= TAU_MAX:
        raise ScheduleError(f"tau={tau} outside [0, {TAU_MAX}]")
    pts = _points(positions)
    if tau == 0.0:
        out = pts.copy()
    else:
        out = rk4_tensor(Tensor(pts), graph.neighbors, _sigma_fn(graph, scale_fn, features), t, tau).value
    if not np.all(np.isfinite(out)):
        raise InstabilityError("non-finite state after RK4 step", tau, step_index)
    return positions.with_points(out) if isinstance(positions, PointCloud) else out


def implicit_euler_step(positions, graph: HeatGraph, tau: float) -> PointCloud | np.ndarray:
    """Solve (I + tau L) z' = z with L = I - P, P the row-stochastic kernel matrix.

    Weights are taken at the given positions. Dense direct solve.
    """
    if tau < 0:
        raise ScheduleError("implicit step needs tau >= 0")
    pts = _points(positions)
    g = graph.reweighted(pts)
    A = (1.0 + tau) * np.eye(len(pts)) - tau * g.transition_matrix()
    # strictly diagonally dominant for tau > 0: |1 + tau - tau P_ii| > tau sum_{j != i} P_ij.
    # Solve for the displacement z' - z = tau A^-1 (P z - z); the right-hand side is
    # built from differences so a locally constant cloud stays put exactly.
    out = pts + tau * np.linalg.solve(A, apply_laplacian(g, pts))
    return positions.with_points(out) if isinstance(positions, PointCloud) else out


def forward_diffuse(
    x,
    schedule: DiffusionSchedule,
    scale_fn: ScaleFn | None = None,
    integrator: str = "rk4",
    k: int = DEFAULT_K,
    graph: HeatGraph | None = None,
) -> Trajectory:
    """Integrate the heat flow of ``x`` across the schedule's grid.

    Without ``scale_fn`` each point keeps a constant kernel scale equal to its
    mean neighbour distance (floored at ``SIGMA_MIN``). With it, scales are
    ``scale_fn(features, t)`` where features are those mean distances on the
    input positions.
    """
    if integrator not in INTEGRATORS:
        raise ValueError(f"unknown integrator {integrator!r}; expected one of {INTEGRATORS}")
    cloud = x if isinstance(x, PointCloud) else PointCloud(x)
    pts = cloud.points
    if graph is None:
        nbr = build_heat_graph(pts, k).neighbors
        feats = mean_neighbor_distance(pts, nbr)
        graph = build_heat_graph(pts, sigmas=np.maximum(feats, SIGMA_MIN), neighbors=nbr)
    else:
        feats = mean_neighbor_distance(pts, graph.neighbors)

    sigma_at = _sigma_fn(graph, scale_fn, feats)
    states = [cloud]
    z = pts
    step = 0
    times = schedule.times
    for s in range(1, len(times)):
        t = float(times[s - 1])
        for h in substeps(times[s - 1], times[s], schedule.tau):
            step += 1
            if integrator == "rk4":
                z = rk4_tensor(Tensor(z), graph.neighbors, sigma_at, t, h).value
            else:
                g = graph.reweighted(z, sigma_at(t + h).value)
                z = implicit_euler_step(z, g, h)
            t += h
            if not np.all(np.isfinite(z)):
                raise InstabilityError(f"non-finite state before grid index {s}", schedule.tau, step)
        states.append(cloud.with_points(z))
    return Trajectory(states, schedule, {"integrator": integrator, "k": graph.k})


def relax(state, delta: float, seed) -> PointCloud | Tensor | np.ndarray:
    """Add i.i.d. N(0, delta^2) offsets to every coordinate.

    ``seed`` is an int or a ``numpy.random.Generator``. Tensors keep their
    tape connection (the noise is a constant).
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(state, Tensor):
        if delta == 0:
            return state
        return ad.add(state, delta * rng.standard_normal(state.shape))
    pts = _points(state)
    out = pts + delta * rng.standard_normal(pts.shape) if delta > 0 else pts.copy()
    return state.with_points(out) if isinstance(state, PointCloud) else out


def write_trajectory(
    trajectory: Trajectory, out_dir, transform: NormalizeTransform | None = None
) -> list[Path]:
    """Dump ``state_000.xyz`` ... and a ``schedule.txt`` manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(trajectory.states) - 1)))
    paths = []
    for i, state in enumerate(trajectory.states):
        cloud = transform.inverse(state) if transform is not None else state
        p = out / f"state_{i:0{width}d}.xyz"
        p.write_text(write_xyz(cloud), encoding="utf-8", newline="\n")
        paths.append(p)
    sched = trajectory.schedule
    manifest = [
        f"S {sched.steps}",
        f"tau {sched.tau!r}",
        "times " + " ".join(repr(float(t)) for t in sched.times),
    ]
    (out / "schedule.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8", newline="\n")
    return paths
