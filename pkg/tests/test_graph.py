import json
import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsgcn.graph import (LAYOUTS, SkeletonGraph, build_adjacency_set, build_skeleton_graph, hop_distances,
                         k_hop_adjacency, normalize_adjacency, window_adjacency)


def nx_oracle(graph):
    g = nx.Graph()
    g.add_nodes_from(range(graph.num_joints))
    g.add_edges_from(graph.edges)
    return dict(nx.all_pairs_shortest_path_length(g))


def test_path3_edges():
    g = build_skeleton_graph("path3")
    assert g.num_joints == 3
    assert {tuple(sorted(e)) for e in g.edges} == {(0, 1), (1, 2)}


def test_crowdpose14_is_connected_tree():
    g = build_skeleton_graph("crowdpose14")
    assert g.num_joints == 14 and len(g.edges) == 13
    lengths = nx_oracle(g)
    assert all(len(lengths[i]) == 14 for i in range(14))


def test_unknown_layout_lists_registered():
    with pytest.raises(KeyError, match="crowdpose14"):
        build_skeleton_graph("coco17")


@pytest.mark.parametrize("edges", [[(0, 0)], [(0, 1), (1, 0)], [(0, 1)]])
def test_invalid_graphs_rejected(edges):
    with pytest.raises(ValueError):
        SkeletonGraph(3, tuple(edges))


def test_custom_layout_from_json(tmp_path):
    path = tmp_path / "star.json"
    path.write_text(json.dumps({"num_joints": 4, "edges": [[0, 1], [0, 2], [0, 3]]}))
    g = build_skeleton_graph(str(path))
    assert k_hop_adjacency(g, 2)[1, 2] == 1


def test_path3_hop_examples():
    g = build_skeleton_graph("path3")
    a1 = k_hop_adjacency(g, 1)
    assert {tuple(ix) for ix in np.argwhere(a1)} == {(0, 1), (1, 0), (1, 2), (2, 1)}
    a2 = k_hop_adjacency(g, 2)
    assert {tuple(ix) for ix in np.argwhere(a2)} == {(0, 2), (2, 0)}
    assert not k_hop_adjacency(g, 3).any()


@pytest.mark.parametrize("layout", sorted(LAYOUTS))
def test_hops_match_bfs_oracle_and_are_disjoint(layout):
    g = build_skeleton_graph(layout)
    lengths = nx_oracle(g)
    K = g.num_joints
    total = np.eye(K)
    for k in range(1, 9):
        A = k_hop_adjacency(g, k)
        expected = np.array([[1.0 if lengths[i][j] == k else 0.0 for j in range(K)] for i in range(K)])
        np.testing.assert_array_equal(A, expected)
        assert np.array_equal(A, A.T) and not np.diag(A).any()
        total += A
    assert total.max() <= 1


def test_hop_distances_match_oracle():
    g = build_skeleton_graph("crowdpose14")
    lengths = nx_oracle(g)
    D = hop_distances(g)
    for i, j in itertools.product(range(14), repeat=2):
        assert D[i, j] == lengths[i][j]


def test_normalization_examples():
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((1, 1))), [[1.0]])
    np.testing.assert_allclose(normalize_adjacency(np.array([[0.0, 1], [1, 0]])), [[0.5, 0.5], [0.5, 0.5]])


def _random_symmetric(seed, n):
    rng = np.random.default_rng(seed)
    A = (rng.random((n, n)) < 0.4).astype(float)
    A = np.triu(A, 1)
    return A + A.T


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9))
def test_normalized_is_symmetric_with_unit_spectral_radius(seed, n):
    An = normalize_adjacency(_random_symmetric(seed, n))
    np.testing.assert_allclose(An, An.T)
    # power iteration on the symmetric matrix
    v = np.random.default_rng(seed).normal(size=n)
    for _ in range(500):
        w = An @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            break
        v = w / nrm
    rho = abs(v @ An @ v)
    assert rho <= 1 + 1e-3


def test_isolated_rows_become_unit_self_loop():
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 0] = 1
    An = normalize_adjacency(A)
    np.testing.assert_array_equal(An[2], [0, 0, 1])


def test_window_examples():
    An = normalize_adjacency(k_hop_adjacency(build_skeleton_graph("path3"), 1))
    np.testing.assert_array_equal(window_adjacency(An, 1), An)
    W = window_adjacency(An, 3)
    assert W.shape == (9, 9)
    for a, b in itertools.product(range(3), repeat=2):
        np.testing.assert_array_equal(W[3 * a:3 * a + 3, 3 * b:3 * b + 3], An)
    np.testing.assert_allclose(W.sum(axis=1), 3 * np.tile(An.sum(axis=1), 3))


def test_window_rejects_even_tau():
    with pytest.raises(ValueError):
        window_adjacency(np.eye(2), 2)


def test_window_preserves_psd_on_path3():
    g = build_skeleton_graph("path3")
    for k in (1, 2, 3):
        An = normalize_adjacency(k_hop_adjacency(g, k))
        if np.linalg.eigvalsh(An).min() < -1e-12:
            continue
        for tau in (3, 5):
            W = window_adjacency(An, tau)
            np.testing.assert_allclose(W, W.T)
            assert np.linalg.eigvalsh(W).min() > -1e-9


def test_adjacency_set_shapes():
    adj = build_adjacency_set(build_skeleton_graph("crowdpose14"))
    assert adj.scales.shape == (8, 14, 14)
    assert adj.windowed_stack(3).shape == (8, 42, 42)
    assert adj.windowed_stack(5).shape == (8, 70, 70)
    assert (adj.scales >= 0).all()
    # scales beyond the diameter reduce to the identity after normalization
    diameter = int(hop_distances(build_skeleton_graph("crowdpose14")).max())
    for k in range(diameter + 1, 9):
        np.testing.assert_array_equal(adj.scales[k - 1], np.eye(14))
