"""Heat-kernel kNN graph and the random-walk graph Laplacian acting on positions.

Edge weights follow the per-centre Gaussian heat kernel

    w_ij = exp(-|z_i - z_j|^2 / (2 sigma_i^2)) / sqrt(2 pi sigma_i^2)

over the k nearest neighbours j of i. The operator applied to positions is the
row-normalised form ``(Lap z)_i = sum_j p_ij (z_j - z_i)`` with
``p_ij = w_ij / sum_j w_ij``; the prefactor cancels in ``p`` and the row
normalisation is evaluated as a shifted softmax so it cannot underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import PointCloud
from .kdtree import InsufficientPointsError, build_kdtree, knn_graph

SIGMA_MIN = 1e-3
DEFAULT_K = 16


class ScaleDomainError(ValueError):
    pass


class DegenerateRowError(FloatingPointError):
    pass


def _as_points(positions) -> np.ndarray:
    if isinstance(positions, PointCloud):
        return positions.points
    if isinstance(positions, Tensor):
        return positions.value
    return np.asarray(positions, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class HeatGraph:
    neighbors: np.ndarray  # (N, k) int
    sigmas: np.ndarray  # (N,)
    weights: np.ndarray  # (N, k)
    probs: np.ndarray  # (N, k) row-normalised weights

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def reweighted(self, positions, sigmas=None) -> "HeatGraph":
        """Same edges, weights recomputed at new positions (and optionally new scales)."""
        s = self.sigmas if sigmas is None else sigmas
        return HeatGraph(self.neighbors, *_kernel(_as_points(positions), self.neighbors, s))

    def transition_matrix(self) -> np.ndarray:
        """Dense row-stochastic P with P[i, j] = p_ij."""
        P = np.zeros((self.n, self.n))
        rows = np.repeat(np.arange(self.n), self.k)
        np.add.at(P, (rows, self.neighbors.ravel()), self.probs.ravel())
        return P


def _check_sigmas(sigmas, n: int) -> np.ndarray:
    s = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (n,)).copy()
    if not np.all(np.isfinite(s)) or np.any(s < SIGMA_MIN):
        raise ScaleDomainError(f"kernel scales must be >= {SIGMA_MIN}, got min {s.min()}")
    return s


def _kernel(pts: np.ndarray, neighbors: np.ndarray, sigmas):
    s = _check_sigmas(sigmas, len(pts))
    d2 = ((pts[neighbors] - pts[:, None, :]) ** 2).sum(axis=2)
    logits = -d2 / (2.0 * s[:, None] ** 2)
    w = np.exp(logits) / np.sqrt(2.0 * np.pi * s[:, None] ** 2)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return s, w, e / e.sum(axis=1, keepdims=True)


def build_heat_graph(positions, k: int = DEFAULT_K, sigmas=1.0, neighbors=None) -> HeatGraph:
    """kNN edges (self excluded) with Gaussian heat-kernel weights.

    ``sigmas`` is a scalar or one scale per point. Pass ``neighbors`` to reuse
    a frozen edge set.
    """
    pts = _as_points(positions)
    n = len(pts)
    if neighbors is None:
        if n <= k:
            raise InsufficientPointsError(f"heat graph with k={k} needs more than {k} points, got {n}")
        neighbors = knn_graph(pts, k, build_kdtree(pts))
    neighbors = np.asarray(neighbors, dtype=np.intp)
    return HeatGraph(neighbors, *_kernel(pts, neighbors, sigmas))


def laplacian(z: Tensor, neighbors: np.ndarray, sigmas: Tensor) -> Tensor:
    """Differentiable ``sum_j p_ij (z_j - z_i)`` for z of shape (N, 3), sigmas (N,)."""
    n, k = neighbors.shape
    diff = ad.gather(z, neighbors) - ad.reshape(z, (n, 1, 3))
    d2 = ad.sum(ad.square(diff), axis=2)
    s2 = ad.reshape(ad.square(sigmas), (n, 1))
    logits = ad.neg(d2) / (2.0 * s2)
    shift = logits.value.max(axis=1, keepdims=True)
    e = ad.exp(logits - shift)
    p = e / ad.sum(e, axis=1, keepdims=True)
    return ad.sum(ad.reshape(p, (n, k, 1)) * diff, axis=1)


def heat_weights(z: Tensor, neighbors: np.ndarray, sigmas: Tensor) -> Tensor:
    """Differentiable unnormalised kernel weights w_ij, shape (N, k)."""
    n, k = neighbors.shape
    diff = ad.gather(z, neighbors) - ad.reshape(z, (n, 1, 3))
    d2 = ad.sum(ad.square(diff), axis=2)
    s2 = ad.reshape(ad.square(sigmas), (n, 1))
    return ad.exp(ad.neg(d2) / (2.0 * s2)) / ad.sqrt(2.0 * np.pi * s2)


def apply_laplacian(graph: HeatGraph, positions) -> np.ndarray:
    """Velocity field (N, 3) of the heat equation on ``graph`` at ``positions``."""
    pts = _as_points(positions)
    if len(pts) != graph.n:
        raise ValueError(f"graph has {graph.n} nodes but {len(pts)} positions were given")
    if not np.all(np.isfinite(graph.probs)):
        raise DegenerateRowError("non-finite heat-kernel weight")
    out = (graph.probs[:, :, None] * (pts[graph.neighbors] - pts[:, None, :])).sum(axis=1)
    if not np.all(np.isfinite(out)):
        raise DegenerateRowError("row normalisation produced a non-finite velocity")
    return out


def mean_neighbor_distance(positions, neighbors: np.ndarray) -> np.ndarray:
    """Per-point mean Euclidean distance to its listed neighbours."""
    pts = _as_points(positions)
    return np.sqrt(((pts[neighbors] - pts[:, None, :]) ** 2).sum(axis=2)).mean(axis=1)
