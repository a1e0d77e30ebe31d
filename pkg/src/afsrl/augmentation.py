"""Two-view data augmentation: random subsampling plus kNN adjacency graphs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from afsrl.errors import TooFewPointsError
from afsrl.numerics import Tensor, constant
from afsrl.pointcloud import PointCloud

BRUTE_FORCE_BELOW = 64


@dataclass(frozen=True)
class Graph:
    """Node features, undirected edges (i < j, sorted) and the normalized adjacency.

    The propagation operator D^-1/2 (A + I) D^-1/2 is held as CSR; ``norm_adj``
    gives the dense n x n view.
    """

    node_features: Tensor  # n x 3, constant
    edges: np.ndarray
    adj_csr: sparse.csr_matrix = field(repr=False, compare=False)
    part_labels: np.ndarray | None = None

    @property
    def norm_adj(self) -> np.ndarray:
        return self.adj_csr.toarray()

    @property
    def n_nodes(self) -> int:
        return self.node_features.rows

    def permuted(self, perm: np.ndarray) -> "Graph":
        """Relabel nodes so new node ``i`` is old node ``perm[i]``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        e = np.sort(inv[self.edges], axis=1)
        e = e[np.lexsort((e[:, 1], e[:, 0]))]
        parts = None if self.part_labels is None else self.part_labels[perm]
        return Graph(constant(self.node_features.data[perm]), e, self.adj_csr[perm][:, perm].tocsr(), parts)


@dataclass(frozen=True)
class AugmentedPair:
    g_u: Graph
    g_v: Graph
    source_id: int


def subsample(cloud: PointCloud, ratio: float, rng: np.random.Generator, k: int = 0) -> PointCloud:
    """Uniform sample of ceil(ratio * n) points without replacement, in random order."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    m = math.ceil(ratio * len(cloud))
    if m <= k:
        raise TooFewPointsError(
            f"subsample of {len(cloud)} points at ratio {ratio} keeps {m}, need more than k={k}"
        )
    idx = rng.permutation(len(cloud))[:m]
    return cloud.take(idx)


def _sq_dist(points: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    d = points[i] - points[j]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def knn_bruteforce(points: np.ndarray, k: int) -> np.ndarray:
    """(n, k) neighbor indices by exhaustive search; ties go to the lower index."""
    n = points.shape[0]
    if n <= k:
        raise TooFewPointsError(f"kNN needs more than k={k} points, got {n}")
    rows = np.arange(n)
    d2 = _sq_dist(points, rows[:, None], rows[None, :])
    d2[rows, rows] = np.inf
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def _resolve(points: np.ndarray, i: int, cand: np.ndarray, k: int) -> np.ndarray:
    cand = cand[cand != i]
    d2 = _sq_dist(points, np.full(cand.shape, i), cand)
    order = np.lexsort((cand, d2))
    return cand[order[:k]]


def knn_tree(points: np.ndarray, k: int) -> np.ndarray:
    """Exact kNN through a kd-tree with the same ordering as ``knn_bruteforce``.

    The tree proposes k+2 candidates per point. Rows where the cut between the
    k-th and (k+1)-th neighbor is a distance tie, or where self was not among
    the candidates, are re-resolved from a radius query so no tie is decided
    by tree traversal order.
    """
    n = points.shape[0]
    if n <= k:
        raise TooFewPointsError(f"kNN needs more than k={k} points, got {n}")
    tree = cKDTree(points)
    m = min(k + 2, n)
    _, cand = tree.query(points, k=m)
    cand = cand.reshape(n, m)
    rows = np.arange(n)
    d2 = _sq_dist(points, rows[:, None], cand)
    is_self = cand == rows[:, None]
    d2_noself = np.where(is_self, np.inf, d2)
    order = np.lexsort((cand, d2_noself), axis=1)
    cand_sorted = np.take_along_axis(cand, order, axis=1)
    d2_sorted = np.take_along_axis(d2_noself, order, axis=1)
    out = cand_sorted[:, :k].copy()

    self_seen = is_self.any(axis=1)
    kth = d2_sorted[:, k - 1]
    nxt = d2_sorted[:, k] if m == k + 2 else np.full(n, np.inf)
    # a missing self means the k+2 slots were crowded by duplicates of it
    suspect = ~self_seen | (nxt <= kth * (1 + 1e-9) + 1e-300)
    for i in np.flatnonzero(suspect):
        r = math.sqrt(kth[i]) * (1 + 1e-7) + 1e-12
        ball = np.asarray(tree.query_ball_point(points[i], r), dtype=np.int64)
        out[i] = _resolve(points, i, ball, k)
    return out


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    if points.shape[0] < BRUTE_FORCE_BELOW:
        return knn_bruteforce(points, k)
    return knn_tree(points, k)


def normalized_adjacency_sparse(n: int, edges: np.ndarray) -> sparse.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 for an undirected edge list, as CSR."""
    diag = np.arange(n)
    rows = np.concatenate([edges[:, 0], edges[:, 1], diag])
    cols = np.concatenate([edges[:, 1], edges[:, 0], diag])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    d = 1.0 / np.sqrt(deg)
    return sparse.csr_matrix((d[rows] * d[cols], (rows, cols)), shape=(n, n))


def normalized_adjacency(n: int, edges: np.ndarray) -> np.ndarray:
    """Dense D^-1/2 (A + I) D^-1/2 for an undirected edge list."""
    a = np.eye(n)
    if len(edges):
        a[edges[:, 0], edges[:, 1]] = 1.0
        a[edges[:, 1], edges[:, 0]] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


def symmetrize(neighbors: np.ndarray) -> np.ndarray:
    n, k = neighbors.shape
    src = np.repeat(np.arange(n), k)
    dst = neighbors.reshape(-1)
    keys = np.unique(np.minimum(src, dst) * n + np.maximum(src, dst))
    return np.stack([keys // n, keys % n], axis=1)


def knn_graph(cloud: PointCloud, k: int) -> Graph:
    if k < 1:
        raise ValueError("k must be >= 1")
    nbrs = knn_indices(cloud.points, k)
    edges = symmetrize(nbrs)
    return Graph(constant(cloud.points), edges, normalized_adjacency_sparse(len(cloud), edges), cloud.part_labels)


def make_pair(cloud: PointCloud, k: int, ratio: float, rng: np.random.Generator, source_id: int = -1) -> AugmentedPair:
    gu = knn_graph(subsample(cloud, ratio, rng, k), k)
    gv = knn_graph(subsample(cloud, ratio, rng, k), k)
    return AugmentedPair(gu, gv, source_id)


def dump_graph(g: Graph, path: str | Path) -> None:
    """Debug dump: ``# nodes n`` then one ``x y z`` line per node, ``# edges E`` then ``i j`` lines."""
    lines = [f"# nodes {g.n_nodes}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in g.node_features.data]
    lines.append(f"# edges {len(g.edges)}")
    lines += [f"{i} {j}" for i, j in g.edges]
    Path(path).write_text("\n".join(lines) + "\n")
