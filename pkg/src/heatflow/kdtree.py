"""Exact k-nearest-neighbour search with a static kd-tree.

Distances are squared Euclidean, computed by :func:`sqdist` everywhere
(tree, brute force, metrics) so that results compare exactly. Ties are broken
by ascending point index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud

LEAF_CAPACITY = 16


class InsufficientPointsError(ValueError):
    pass


def sqdist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


@dataclass(frozen=True, eq=False)
class KdTree:
    """Array-backed kd-tree.

    Node ``i`` is a leaf when ``axis[i] == -1``; its points are
    ``perm[start[i]:end[i]]``. Inner nodes split on ``axis[i]`` at ``split[i]``
    with children ``left[i]`` (coordinate <= split) and ``right[i]``.
    """

    points: np.ndarray
    perm: np.ndarray
    axis: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    leaf_capacity: int

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def leaves(self) -> list[int]:
        return [i for i in range(len(self.axis)) if self.axis[i] == -1]


def build_kdtree(cloud: PointCloud | np.ndarray, leaf_capacity: int = LEAF_CAPACITY) -> KdTree:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if n < 1:
        raise InsufficientPointsError("cannot index an empty cloud")
    perm = np.arange(n, dtype=np.intp)
    axis, split, left, right, start, end = [], [], [], [], [], []

    def node(lo: int, hi: int) -> int:
        idx = len(axis)
        axis.append(-1)
        split.append(0.0)
        left.append(-1)
        right.append(-1)
        start.append(lo)
        end.append(hi)
        if hi - lo <= leaf_capacity:
            return idx
        sub = pts[perm[lo:hi]]
        spread = sub.max(axis=0) - sub.min(axis=0)
        ax = int(np.argmax(spread))
        if spread[ax] == 0.0:
            return idx  # all coincident: keep as one (oversized) leaf
        # stable sort keeps construction deterministic with duplicate coordinates
        order = np.argsort(sub[:, ax], kind="stable")
        perm[lo:hi] = perm[lo:hi][order]
        mid = (lo + hi) // 2
        axis[idx] = ax
        split[idx] = float(pts[perm[mid - 1], ax])
        left[idx] = node(lo, mid)
        right[idx] = node(mid, hi)
        return idx

    node(0, n)
    return KdTree(
        points=pts,
        perm=perm,
        axis=np.array(axis, dtype=np.intp),
        split=np.array(split),
        left=np.array(left, dtype=np.intp),
        right=np.array(right, dtype=np.intp),
        start=np.array(start, dtype=np.intp),
        end=np.array(end, dtype=np.intp),
        leaf_capacity=leaf_capacity,
    )


def query(tree: KdTree, q, k: int, exclude: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` nearest indices to position ``q`` and their squared distances.

    ``exclude`` removes one index from consideration (used for self-queries).
    Results are sorted by (distance, index).
    """
    q = np.asarray(q, dtype=np.float64)
    best_d = np.empty(0)
    best_i = np.empty(0, dtype=np.intp)
    worst = np.inf
    pts, perm = tree.points, tree.perm
    axis, split, left, right = tree.axis, tree.split, tree.left, tree.right
    stack = [(0, 0.0)]
    while stack:
        nid, bound = stack.pop()
        if bound > worst:
            continue
        ax = axis[nid]
        if ax == -1:
            idx = perm[tree.start[nid] : tree.end[nid]]
            d = sqdist(pts[idx], q)
            if exclude >= 0:
                keep = idx != exclude
                idx, d = idx[keep], d[keep]
            cand_d = np.concatenate([best_d, d])
            cand_i = np.concatenate([best_i, idx])
            order = np.lexsort((cand_i, cand_d))[:k]
            best_d, best_i = cand_d[order], cand_i[order]
            if len(best_d) == k:
                worst = best_d[-1]
            continue
        diff = q[ax] - split[nid]
        near, far = (left[nid], right[nid]) if diff <= 0 else (right[nid], left[nid])
        # far side lower bound: the squared gap to the splitting plane
        stack.append((far, max(bound, diff * diff)))
        stack.append((near, bound))
    return best_i, best_d


def knn(tree: KdTree, query_index: int, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points to point ``query_index``."""
    if not 0 <= query_index < tree.n:
        raise IndexError(f"query index {query_index} out of range for {tree.n} points")
    if k < 1:
        raise ValueError("k must be positive")
    if k > tree.n - 1:
        raise InsufficientPointsError(f"k={k} needs at least {k + 1} points, cloud has {tree.n}")
    idx, _ = query(tree, tree.points[query_index], k, exclude=query_index)
    return idx


def knn_graph(cloud: PointCloud | np.ndarray, k: int, tree: KdTree | None = None) -> np.ndarray:
    """(N, k) neighbour table, row i = knn(tree, i, k)."""
    tree = tree or build_kdtree(cloud)
    if k > tree.n - 1:
        raise InsufficientPointsError(f"k={k} needs at least {k + 1} points, cloud has {tree.n}")
    return np.stack([knn(tree, i, k) for i in range(tree.n)])


def nearest(tree: KdTree, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest tree point (index, squared distance) for every row of ``queries``."""
    queries = np.asarray(queries, dtype=np.float64)
    idx = np.empty(len(queries), dtype=np.intp)
    d2 = np.empty(len(queries))
    for r, q in enumerate(queries):
        i, d = query(tree, q, 1)
        idx[r], d2[r] = i[0], d[0]
    return idx, d2


def brute_force_knn(points: np.ndarray, query_index: int, k: int) -> np.ndarray:
    d = sqdist(points, points[query_index])
    idx = np.arange(len(points))
    keep = idx != query_index
    order = np.lexsort((idx[keep], d[keep]))[:k]
    return idx[keep][order]
