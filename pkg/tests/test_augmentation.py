import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afsrl.augmentation import (
    dump_graph,
    knn_bruteforce,
    knn_graph,
    knn_indices,
    knn_tree,
    make_pair,
    normalized_adjacency,
    subsample,
    symmetrize,
)
from afsrl.errors import TooFewPointsError
from afsrl.pointcloud import PointCloud, generate_synthetic


def cloud_of(points, parts=None):
    return PointCloud(np.asarray(points, dtype=float), part_labels=parts)


def test_subsample_full_ratio_is_permutation():
    c = generate_synthetic("cube", 100, 0.0, 0)
    s = subsample(c, 1.0, np.random.default_rng(0))
    assert sorted(map(tuple, s.points)) == sorted(map(tuple, c.points))


def test_subsample_half_is_subset_with_parts():
    c = generate_synthetic("cylinder", 1024, 0.0, 0)
    s = subsample(c, 0.5, np.random.default_rng(1))
    assert len(s) == 512
    lookup = {tuple(p): int(l) for p, l in zip(c.points, c.part_labels)}
    assert all(lookup[tuple(p)] == l for p, l in zip(s.points, s.part_labels))


def test_subsample_inclusion_frequency():
    n, draws = 40, 10_000
    c = cloud_of(np.arange(n * 3).reshape(n, 3))
    rng = np.random.default_rng(2)
    hits = np.zeros(n)
    for _ in range(draws):
        hits[subsample(c, 0.5, rng).points[:, 0].astype(int) // 3] += 1
    assert np.all(np.abs(hits / draws - 0.5) < 0.02)


def test_subsample_too_few_points():
    c = cloud_of(np.random.default_rng(0).standard_normal((20, 3)))
    with pytest.raises(TooFewPointsError):
        subsample(c, 0.5, np.random.default_rng(0), k=10)
    with pytest.raises(ValueError):
        subsample(c, 0.0, np.random.default_rng(0))


def test_knn_collinear_hand_table():
    pts = [[0, 0, 0], [1, 0, 0], [3, 0, 0]]
    assert knn_bruteforce(np.array(pts, float), 1).ravel().tolist() == [1, 0, 1]
    g = knn_graph(cloud_of(pts), 1)
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_two_node_graph_normalization():
    g = knn_graph(cloud_of([[0, 0, 0], [5, 5, 5]]), 1)
    assert g.edges.tolist() == [[0, 1]]
    assert np.allclose(g.norm_adj, 0.5, rtol=0, atol=1e-15)


def test_knn_needs_more_points_than_k():
    with pytest.raises(TooFewPointsError):
        knn_graph(cloud_of(np.zeros((3, 3))), 3)


def test_tie_break_prefers_lower_index():
    # point 0 is equidistant from 1 and 2
    pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 5, 0]], float)
    assert knn_bruteforce(pts, 1)[0, 0] == 1
    assert knn_tree(pts, 1)[0, 0] == 1


def test_tree_matches_bruteforce_random_200():
    pts = np.random.default_rng(3).random((200, 3))
    assert np.array_equal(knn_tree(pts, 10), knn_bruteforce(pts, 10))


@pytest.mark.parametrize("k", [1, 4, 10])
def test_tree_matches_bruteforce_with_ties(k):
    # integer lattice: massive distance ties, plus duplicated points
    g = np.stack(np.meshgrid(*[np.arange(5)] * 3, indexing="ij"), -1).reshape(-1, 3).astype(float)
    pts = np.vstack([g, g[:7]])
    perm = np.random.default_rng(k).permutation(len(pts))
    pts = pts[perm]
    assert np.array_equal(np.sort(knn_tree(pts, k), axis=1), np.sort(knn_bruteforce(pts, k), axis=1))


@settings(max_examples=40, deadline=None)
@given(st.integers(12, 300), st.integers(1, 11), st.integers(0, 2**32 - 1))
def test_tree_matches_bruteforce_property(n, k, seed):
    rng = np.random.default_rng(seed)
    pts = np.round(rng.random((n, 3)), 2)  # coarse grid invites ties
    assert np.array_equal(np.sort(knn_tree(pts, k), axis=1), np.sort(knn_bruteforce(pts, k), axis=1))


def test_knn_indices_dispatch_small_uses_bruteforce():
    pts = np.random.default_rng(4).random((30, 3))
    assert np.array_equal(knn_indices(pts, 5), knn_bruteforce(pts, 5))


def _dense_normalization(n, edges):
    a = np.zeros((n, n))
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    a_hat = a + np.eye(n)
    d = np.diag(1.0 / np.sqrt(a_hat.sum(axis=1)))
    return d @ a_hat @ d


def test_norm_adj_matches_direct_dense_computation():
    c = generate_synthetic("torus", 150, 0.01, 5)
    g = knn_graph(c, 6)
    ref = _dense_normalization(len(c), g.edges)
    assert np.max(np.abs(g.norm_adj - ref)) < 1e-12
    assert np.max(np.abs(normalized_adjacency(len(c), g.edges) - ref)) < 1e-12
    assert np.max(np.abs(g.norm_adj - g.norm_adj.T)) < 1e-12


def test_regular_graph_rows_sum_to_one():
    # 8-cycle: every node degree 2, plus the self loop
    n = 8
    edges = np.array(sorted((min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n)))
    from afsrl.augmentation import normalized_adjacency_sparse

    adj = normalized_adjacency_sparse(n, edges).toarray()
    assert np.allclose(adj.sum(axis=1), 1.0, atol=1e-12)


def test_graph_edge_invariants():
    g = knn_graph(generate_synthetic("cube", 300, 0.02, 1), 10)
    e = g.edges
    assert np.all(e[:, 0] < e[:, 1]) and e.min() >= 0 and e.max() < g.n_nodes
    assert len({tuple(x) for x in e}) == len(e)
    deg = np.bincount(e.ravel(), minlength=g.n_nodes)
    assert deg.min() >= 10  # union symmetrization keeps every directed pick


def test_symmetrize_union():
    nb = np.array([[1], [0], [1]])
    assert symmetrize(nb).tolist() == [[0, 1], [1, 2]]


def test_knn_graph_permutation_equivariant():
    c = generate_synthetic("cylinder", 200, 0.02, 9)
    perm = np.random.default_rng(0).permutation(len(c))
    g = knn_graph(c, 8)
    gp = knn_graph(c.take(perm), 8)
    assert np.array_equal(gp.edges, g.permuted(perm).edges)
    assert np.max(np.abs(gp.norm_adj - g.norm_adj[np.ix_(perm, perm)])) < 1e-15


def test_make_pair_sizes_on_sphere():
    c = generate_synthetic("sphere", 256, 0.0, 0)
    pair = make_pair(c, 4, 0.8, np.random.default_rng(0), source_id=3)
    assert math.ceil(0.8 * 256) == 205
    assert pair.g_u.n_nodes == pair.g_v.n_nodes == 205
    assert pair.source_id == 3


def test_make_pair_full_ratio_same_rng_is_isomorphic():
    c = generate_synthetic("torus", 128, 0.0, 1)
    same = make_pair(c, 5, 1.0, np.random.default_rng(7))
    again = make_pair(c, 5, 1.0, np.random.default_rng(7))
    assert np.array_equal(same.g_u.edges, again.g_u.edges)
    assert np.array_equal(same.g_v.node_features.data, again.g_v.node_features.data)
    a, b = same.g_u, same.g_v
    # map b's nodes onto a's by coordinates
    index_a = {tuple(p): i for i, p in enumerate(a.node_features.data)}
    perm = np.array([index_a[tuple(p)] for p in b.node_features.data])
    assert np.array_equal(a.permuted(perm).edges, b.edges)


def test_make_pair_overlap_expectation():
    n, ratio, draws = 256, 0.8, 2000
    c = cloud_of(np.random.default_rng(1).standard_normal((n, 3)))
    m = math.ceil(ratio * n)
    rng = np.random.default_rng(2)
    overlaps = []
    for _ in range(draws):
        u = subsample(c, ratio, rng, 4)
        v = subsample(c, ratio, rng, 4)
        overlaps.append(len({tuple(p) for p in u.points} & {tuple(p) for p in v.points}))
    # hypergeometric mean m^2 / n, standard error about 0.05 here
    assert abs(np.mean(overlaps) - m * m / n) < 0.3


def test_dump_graph(tmp_path):
    g = knn_graph(cloud_of([[0, 0, 0], [1, 0, 0], [3, 0, 0]]), 1)
    p = tmp_path / "g.txt"
    dump_graph(g, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "# nodes 3" and lines[4] == "# edges 2" and lines[5:] == ["0 1", "1 2"]
