"""Point-set distances (Chamfer, Hausdorff, exact EMD) and the training losses built on them.

Conventions:

* Chamfer = mean squared nearest distance X->Y plus the same Y->X (not halved).
* Hausdorff = symmetric max-min Euclidean distance (unsquared).
* EMD = mean Euclidean distance under the optimal bijection (equal sizes only).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import PointCloud
from .kdtree import build_kdtree, nearest


class CardinalityError(ValueError):
    pass


class ContractError(ValueError):
    pass


def _pts(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def nearest_indices(X, Y) -> tuple[np.ndarray, np.ndarray]:
    """For each row of X, the index of and squared distance to its nearest Y point."""
    return nearest(build_kdtree(_pts(Y)), _pts(X))


def chamfer(X, Y) -> float:
    _, dxy = nearest_indices(X, Y)
    _, dyx = nearest_indices(Y, X)
    return float(dxy.mean() + dyx.mean())


def hausdorff(X, Y) -> float:
    _, dxy = nearest_indices(X, Y)
    _, dyx = nearest_indices(Y, X)
    return float(np.sqrt(max(dxy.max(), dyx.max())))


def distance_matrix(X, Y) -> np.ndarray:
    x, y = _pts(X), _pts(Y)
    d = x[:, None, :] - y[None, :, :]
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2)


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching of a square cost matrix.

    Shortest augmenting path form of the Hungarian method with row/column
    potentials, O(n^3). Returns ``col`` with row i assigned to column col[i].
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise CardinalityError(f"assignment needs a square cost matrix, got {cost.shape}")
    # 1-based columns; column 0 is the virtual start of each augmenting path
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.intp)  # row_of[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col = np.empty(n, dtype=np.intp)
    col[row_of[1:] - 1] = np.arange(n)
    return col


def _matched_mean(cost: np.ndarray, perm: np.ndarray) -> float:
    return float(cost[np.arange(len(perm)), perm].mean())


def emd_exact(X, Y) -> tuple[float, np.ndarray]:
    """Exact EMD and the optimal bijection (X[i] <-> Y[match[i]])."""
    x, y = _pts(X), _pts(Y)
    if len(x) != len(y):
        raise CardinalityError(f"EMD needs equal sizes, got {len(x)} and {len(y)}")
    cost = distance_matrix(x, y)
    match = linear_assignment(cost)
    return _matched_mean(cost, match), match


def emd_bruteforce(X, Y) -> float:
    """EMD by enumerating all n! bijections (n <= 8)."""
    x, y = _pts(X), _pts(Y)
    n = len(x)
    if len(y) != n:
        raise CardinalityError(f"EMD needs equal sizes, got {n} and {len(y)}")
    if n > 8:
        raise ValueError(f"brute-force EMD limited to n <= 8, got {n}")
    cost = distance_matrix(x, y)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    totals = cost[np.arange(n), perms].sum(axis=1)
    best = perms[int(np.argmin(totals))]
    return _matched_mean(cost, best)


# -- differentiable losses ---------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(_pts(x))


def chamfer_loss(X, Y) -> Tensor:
    """Differentiable Chamfer; nearest-neighbour assignments are held constant."""
    X, Y = _as_tensor(X), _as_tensor(Y)
    ixy, _ = nearest_indices(X.value, Y.value)
    iyx, _ = nearest_indices(Y.value, X.value)
    dxy = ad.sum(ad.square(X - ad.gather(Y, ixy)), axis=1)
    dyx = ad.sum(ad.square(Y - ad.gather(X, iyx)), axis=1)
    return ad.mean(dxy) + ad.mean(dyx)


def emd_loss(X, Y) -> Tensor:
    """Differentiable EMD; the optimal matching is held constant."""
    X, Y = _as_tensor(X), _as_tensor(Y)
    _, match = emd_exact(X.value, Y.value)
    diff = X - ad.gather(Y, match)
    return ad.mean(ad.sqrt(ad.sum(ad.square(diff), axis=1)))


def set_distance_loss(X, Y, alpha: float = 0.5) -> Tensor:
    """alpha * Chamfer + (1 - alpha) * EMD."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return chamfer_loss(X, Y)
    if alpha == 0.0:
        return emd_loss(X, Y)
    return alpha * chamfer_loss(X, Y) + (1.0 - alpha) * emd_loss(X, Y)


@dataclass(frozen=True)
class VlbWeights:
    prior: float = 1.0
    step: float = 1.0
    rec: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if min(self.prior, self.step, self.rec) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.prior, self.step, self.rec) <= 0:
            raise ValueError("at least one loss weight must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class VlbTerms:
    total: Tensor
    prior: float
    step: float
    rec: float
    per_step: list[float] = field(default_factory=list)


def refined_vlb_loss(
    hq_states,
    lq_states,
    predictions,
    x_o,
    x_h,
    weights: VlbWeights = VlbWeights(),
    hq_times=None,
    lq_times=None,
) -> VlbTerms:
    """Three-term surrogate: prior matching, step-wise matching, reconstruction.

    ``hq_states``/``lq_states`` are the forward states z^{t_0..t_S} of x_h and
    x_l (Trajectory objects or lists). ``predictions[s - 1]`` is the reverse
    prediction of z_h^{t_{s-1}} made from grid state s, for s = 1..S. The
    step-wise sum runs over s = 2..S; the s = 1 prediction is x_o and is
    scored by the reconstruction term instead.
    """
    hq = _states(hq_states)
    lq = _states(lq_states)
    if len(hq) != len(lq):
        raise ContractError(f"trajectories differ in length: {len(hq)} vs {len(lq)}")
    for a, b in ((hq_times, lq_times), (_times(hq_states), _times(lq_states))):
        if a is not None and b is not None and not np.array_equal(a, b):
            raise ContractError("trajectories were produced on different schedules")
    S = len(hq) - 1
    if len(predictions) != S:
        raise ContractError(f"expected {S} step predictions, got {len(predictions)}")

    a = weights.alpha
    total = Tensor(0.0)
    prior_v = step_v = rec_v = 0.0
    per_step = []
    if weights.prior > 0:
        d = set_distance_loss(hq[-1], lq[-1], a)
        prior_v = d.item()
        total = total + weights.prior * d
    if weights.step > 0:
        for s in range(2, S + 1):
            d = set_distance_loss(predictions[s - 1], hq[s - 1], a)
            per_step.append(d.item())
            total = total + weights.step * d
        step_v = float(np.sum(per_step))
    if weights.rec > 0:
        d = set_distance_loss(x_o, x_h, a)
        rec_v = d.item()
        total = total + weights.rec * d
    return VlbTerms(total, prior_v, step_v, rec_v, per_step)


def _states(traj) -> list:
    states = getattr(traj, "states", traj)
    return [s if isinstance(s, Tensor) else Tensor(_pts(s)) for s in states]


def _times(traj):
    sched = getattr(traj, "schedule", None)
    return None if sched is None else sched.times


# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    name: str
    n_pred: int
    n_ref: int
    chamfer: float
    hausdorff: float
    emd: float

    def to_row(self) -> str:
        return (
            f"{self.name},{self.n_pred},{self.n_ref},"
            f"{self.chamfer:.6e},{self.hausdorff:.6e},{self.emd:.6e}"
        )


def compare(pred, ref, name: str = "") -> MetricsReport:
    """CD/HD/EMD of ``pred`` against ``ref`` (EMD is NaN when sizes differ)."""
    p, r = _pts(pred), _pts(ref)
    emd = emd_exact(p, r)[0] if len(p) == len(r) else float("nan")
    return MetricsReport(name, len(p), len(r), chamfer(p, r), hausdorff(p, r), emd)
