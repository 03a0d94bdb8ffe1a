import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convseg.errors import NeighborhoodError
from convseg.knn_graph import (KD_TREE_MIN_POINTS, dynamic_graph, kd_tree_build, knn_brute_force,
                               knn_kd_tree)


def enumerate_knn(points, k):
    """Independent oracle: Python loops and exact sorting on (distance, index)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    rows = []
    for i, p in enumerate(pts):
        cand = []
        for j, q in enumerate(pts):
            if j != i:
                cand.append((sum((a - b) ** 2 for a, b in zip(q, p)), j))
        rows.append([j for _, j in sorted(cand)[:k]])
    return np.array(rows)


def test_hand_example():
    assert knn_brute_force([0.0, 1.0, 3.0], 1).neighbors.tolist() == [[1], [0], [1]]


def test_tie_goes_to_lower_index():
    assert knn_brute_force([0.0, 1.0, -1.0], 1).neighbors[0].tolist() == [1]


def test_complete_graph():
    g = knn_brute_force(np.random.default_rng(0).normal(size=(6, 2)), 5)
    for i, row in enumerate(g.neighbors):
        assert sorted(row) == [j for j in range(6) if j != i]


def test_k_too_large():
    with pytest.raises(NeighborhoodError):
        knn_brute_force(np.zeros((3, 2)), 3)
    with pytest.raises(NeighborhoodError):
        knn_brute_force(np.zeros((3, 2)), 0)


def test_duplicates_sort_first():
    pts = np.array([[0.0, 0.0], [5.0, 5.0], [0.0, 0.0], [0.1, 0.0]])
    assert knn_brute_force(pts, 2).neighbors[0].tolist() == [2, 3]


def test_matches_enumeration_oracle():
    rng = np.random.default_rng(4)
    for n, d, k in [(7, 1, 2), (12, 3, 5), (9, 2, 8)]:
        pts = np.round(rng.normal(size=(n, d)), 1)  # rounding forces ties
        np.testing.assert_array_equal(knn_brute_force(pts, k).neighbors, enumerate_knn(pts, k))


class TestKdTree:
    def test_single_leaf(self):
        tree = kd_tree_build(np.array([[1.0, 2.0]]))
        assert tree.n_nodes == 1 and tree.depth == 1

    def test_balanced(self):
        tree = kd_tree_build(np.random.default_rng(0).normal(size=(1000, 3)), leaf_size=1)
        # median splits give depth ceil(log2(n)) + 1
        assert tree.depth == 11

    def test_lower_median_split(self):
        tree = kd_tree_build(np.array([[4.0], [1.0], [3.0], [2.0]]), leaf_size=1)
        start, stop, axis, split, left, right = tree._nodes[0]
        assert axis == 0 and split == 2.0

    def test_axis_cycles(self):
        tree = kd_tree_build(np.random.default_rng(1).normal(size=(16, 3)), leaf_size=1)
        root = tree._nodes[0]
        assert root[2] == 0
        assert tree._nodes[root[4]][2] == 1 and tree._nodes[root[5]][2] == 1

    def test_all_duplicates(self):
        pts = np.ones((30, 3))
        g = knn_kd_tree(pts, 4)
        assert g.neighbors[0].tolist() == [1, 2, 3, 4]
        assert g.neighbors[5].tolist() == [0, 1, 2, 3]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 60), st.sampled_from([1, 2, 3]), st.integers(1, 8),
           st.integers(0, 2**31), st.booleans())
    def test_matches_brute_force(self, n, d, k, seed, grid):
        k = min(k, n - 1)
        rng = np.random.default_rng(seed)
        pts = rng.integers(0, 3, size=(n, d)).astype(float) if grid else rng.normal(size=(n, d))
        np.testing.assert_array_equal(knn_kd_tree(pts, k).neighbors,
                                      knn_brute_force(pts, k).neighbors)


class TestDynamicGraph:
    def test_feature_space_matches_brute_force(self):
        f = np.random.default_rng(2).normal(size=(500, 64))
        np.testing.assert_array_equal(dynamic_graph(f, 20).neighbors,
                                      knn_brute_force(f, 20).neighbors)

    def test_coordinates_same_as_coordinate_graph(self):
        p = np.random.default_rng(3).normal(size=(50, 3))
        np.testing.assert_array_equal(dynamic_graph(p, 5).neighbors, knn_brute_force(p, 5).neighbors)

    def test_large_low_dim_uses_tree_and_agrees(self):
        p = np.random.default_rng(5).normal(size=(KD_TREE_MIN_POINTS, 2))
        np.testing.assert_array_equal(dynamic_graph(p, 3).neighbors, knn_brute_force(p, 3).neighbors)

    @pytest.mark.parametrize("scale,shift", [(2.0, 0.0), (0.5, 0.0), (1.0, 3.0), (4.0, -1.0)])
    def test_scale_translate_invariance(self, scale, shift):
        # powers of two keep the arithmetic exact
        p = np.random.default_rng(6).integers(-8, 8, size=(40, 3)).astype(float) / 4
        base = dynamic_graph(p, 6).neighbors
        np.testing.assert_array_equal(dynamic_graph(p * scale + shift, 6).neighbors, base)

    def test_row_invariants(self):
        g = dynamic_graph(np.random.default_rng(7).normal(size=(80, 4)), 7)
        for i, row in enumerate(g.neighbors):
            assert i not in row and len(set(row)) == 7 and row.min() >= 0 and row.max() < 80
