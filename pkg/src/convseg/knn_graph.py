"""Exact k-nearest-neighbour graphs over point coordinates or features.

Distances are squared Euclidean, accumulated one dimension at a time in a
fixed order so that the brute-force and kd-tree paths produce bit-identical
values and therefore identical tie resolution (smaller index wins).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NeighborhoodError
from .tensor_core import as_array

DEFAULT_K = 20
KD_TREE_MAX_DIM = 16
# Below this many points the vectorised brute force beats a Python tree walk.
KD_TREE_MIN_POINTS = 2048


@dataclass(frozen=True)
class KnnGraph:
    n_points: int
    k: int
    neighbors: np.ndarray

    def __post_init__(self):
        nb = self.neighbors
        if nb.shape != (self.n_points, self.k):
            raise DimensionError(f"neighbour matrix {nb.shape} != ({self.n_points}, {self.k})")


def _validate(points, k: int) -> np.ndarray:
    pts = as_array(points, "points")
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
        raise DimensionError(f"expected an N x D point array, got {pts.shape}")
    n = pts.shape[0]
    if not 1 <= k <= n - 1:
        raise NeighborhoodError(f"k={k} needs 1 <= k <= N-1 with N={n}")
    return pts


def _sq_dist(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared distances from ``q`` (shape D or M x 1 x D) to ``rows``."""
    d = rows.shape[-1]
    acc = (rows[..., 0] - q[..., 0]) ** 2
    for j in range(1, d):
        acc = acc + (rows[..., j] - q[..., j]) ** 2
    return acc


def pairwise_sq_dist(points: np.ndarray) -> np.ndarray:
    """``out[i, j]`` = squared distance, same rounding as :func:`_sq_dist`."""
    cols = np.ascontiguousarray(points.T)
    n = points.shape[0]
    acc = np.empty((n, n))
    tmp = np.empty((n, n))
    np.subtract(cols[0][None, :], cols[0][:, None], out=acc)
    np.square(acc, out=acc)
    for c in cols[1:]:
        np.subtract(c[None, :], c[:, None], out=tmp)
        np.square(tmp, out=tmp)
        acc += tmp
    return acc


def knn_brute_force(points, k: int) -> KnnGraph:
    pts = _validate(points, k)
    n = pts.shape[0]
    dist = pairwise_sq_dist(pts)
    dist[np.arange(n), np.arange(n)] = np.inf
    # stable sort on distance keeps ascending index order among ties
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return KnnGraph(n, k, order.astype(np.int64))


class KdTree:
    """Balanced kd-tree with median splits and cycling split axes.

    Nodes are stored as small lists in one node table.  A node whose slice holds at most
    ``leaf_size`` points is a leaf; otherwise it splits on ``depth % D`` at
    the lower median of its slice.
    """

    def __init__(self, points, leaf_size: int = 8):
        pts = as_array(points, "points")
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DimensionError(f"expected an N x D point array, got {pts.shape}")
        self.points = pts
        self.n, self.dim = pts.shape
        self.leaf_size = max(1, leaf_size)
        self.index = np.arange(self.n)
        # per node: start, stop, split axis, split value, left, right
        self._nodes: list[list] = []
        self._build(0, self.n, 0)

    def _build(self, start: int, stop: int, depth: int) -> int:
        node_id = len(self._nodes)
        node = [start, stop, -1, 0.0, -1, -1]
        self._nodes.append(node)
        count = stop - start
        if count <= self.leaf_size:
            return node_id
        axis = depth % self.dim
        seg = self.index[start:stop]
        keys = self.points[seg, axis]
        order = np.lexsort((seg, keys))
        self.index[start:stop] = seg[order]
        mid = start + (count - 1) // 2  # lower median
        node[2] = axis
        node[3] = self.points[self.index[mid], axis]
        node[4] = self._build(start, mid + 1, depth + 1)
        node[5] = self._build(mid + 1, stop, depth + 1)
        return node_id

    @property
    def n_nodes(self) -> int:
        return len(self._nodes)

    @property
    def depth(self) -> int:
        def walk(i):
            nd = self._nodes[i]
            if nd[2] < 0:
                return 1
            return 1 + max(walk(nd[4]), walk(nd[5]))
        return walk(0)

    def query(self, q, k: int, exclude: int = -1) -> np.ndarray:
        """Indices of the ``k`` nearest points to ``q`` ordered by
        (distance, index), skipping point ``exclude``."""
        q = np.asarray(q, dtype=np.float64)
        # max-heap of the current best as (-dist, -index)
        heap: list[tuple[float, int]] = []
        nodes = self._nodes
        stack = [(0, 0.0)]
        while stack:
            node_id, bound = stack.pop()
            if len(heap) == k and bound > -heap[0][0]:
                continue
            start, stop, axis, split, left, right = nodes[node_id]
            if axis < 0:
                idx = self.index[start:stop]
                dists = _sq_dist(self.points[idx], q)
                for d, i in zip(dists.tolist(), idx.tolist()):
                    if i == exclude:
                        continue
                    if len(heap) < k:
                        heapq.heappush(heap, (-d, -i))
                    elif (d, i) < (-heap[0][0], -heap[0][1]):
                        heapq.heapreplace(heap, (-d, -i))
                continue
            diff = q[axis] - split
            gap = diff * diff
            near, far = (left, right) if diff <= 0 else (right, left)
            # far side pushed first so the near side is explored first
            stack.append((far, max(bound, gap)))
            stack.append((near, bound))
        best = sorted((-d, -i) for d, i in heap)
        return np.array([i for _, i in best], dtype=np.int64)


def kd_tree_build(points, leaf_size: int = 8) -> KdTree:
    return KdTree(points, leaf_size=leaf_size)


def knn_kd_tree(points, k: int, tree: KdTree | None = None) -> KnnGraph:
    pts = _validate(points, k)
    tree = tree if tree is not None else KdTree(pts)
    rows = [tree.query(pts[i], k, exclude=i) for i in range(pts.shape[0])]
    return KnnGraph(pts.shape[0], k, np.vstack(rows))


def dynamic_graph(features, k: int = DEFAULT_K) -> KnnGraph:
    """kNN graph in the current feature space.

    Uses the kd-tree for low-dimensional, large inputs and exact brute force
    otherwise; both paths return identical graphs.
    """
    feats = _validate(features, k)
    n, d = feats.shape
    if d <= KD_TREE_MAX_DIM and n >= KD_TREE_MIN_POINTS:
        return knn_kd_tree(feats, k)
    return knn_brute_force(feats, k)
