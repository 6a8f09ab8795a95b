"""Tests for :mod:`src.graph`."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from src.errors import ConfigError, DataError
from src.graph import NeighborGraph, build_knn_graph, connected_components, geodesic_all_pairs, write_edge_list


def _floyd_warshall(graph: NeighborGraph) -> np.ndarray:
    dist = np.full((graph.node_count, graph.node_count), np.inf)
    np.fill_diagonal(dist, 0.0)
    for u, v, w in graph.edges():
        dist[u, v] = dist[v, u] = w
    for m in range(graph.node_count):
        dist = np.minimum(dist, dist[:, m, None] + dist[None, m, :])
    return dist


def _union_find_components(graph: NeighborGraph) -> np.ndarray:
    parent = list(range(graph.node_count))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v, _ in graph.edges():
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    roots = [find(x) for x in range(graph.node_count)]
    numbering = {root: idx for idx, root in enumerate(sorted(set(roots)))}
    return np.array([numbering[root] for root in roots])


def test_ties_go_to_lower_index_and_graph_is_symmetric() -> None:
    points = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [1.1, 0.0], [-1.1, 0.0]])
    graph = build_knn_graph(points, k=1)
    pairs = {(u, v) for u, v, _ in graph.edges()}
    assert pairs == {(0, 1), (1, 3), (2, 4)}
    for u, row in enumerate(graph.adjacency):
        for v, w in row:
            assert (u, w) in graph.adjacency[v]
    assert connected_components(graph).tolist() == [0, 0, 1, 0, 1]


def test_every_node_keeps_at_least_k_neighbours() -> None:
    rng = np.random.default_rng(0)
    graph = build_knn_graph(rng.normal(size=(30, 3)), k=4)
    assert all(graph.degree(node) >= 4 for node in range(graph.node_count))


def test_duplicate_points_give_zero_weight_edges() -> None:
    points = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 0.0]])
    graph = build_knn_graph(points, k=1)
    assert (0, 1, 0.0) in graph.edges()
    geo = geodesic_all_pairs(graph)
    assert geo.dist[0, 1] == 0.0


def test_geodesics_match_floyd_warshall_on_random_graphs() -> None:
    rng = np.random.default_rng(1234)
    for _ in range(100):
        n_nodes = int(rng.integers(2, 65))
        dim = int(rng.integers(2, 6))
        k = int(rng.integers(1, min(n_nodes - 1, 6) + 1))
        graph = build_knn_graph(rng.normal(size=(n_nodes, dim)), k)
        geo = geodesic_all_pairs(graph)
        np.testing.assert_allclose(geo.dist, _floyd_warshall(graph), rtol=0, atol=1e-9)
        assert np.array_equal(geo.component_id, _union_find_components(graph))


def test_geodesic_matrix_is_a_metric() -> None:
    rng = np.random.default_rng(5)
    geo = geodesic_all_pairs(build_knn_graph(rng.normal(size=(25, 2)), k=3))
    dist = geo.dist
    assert np.array_equal(dist, dist.T)
    assert np.all(np.diag(dist) == 0.0)
    finite = np.isfinite(dist)
    via = dist[:, :, None] + dist[None, :, :]
    bound = via.min(axis=1)
    assert np.all(dist[finite] <= bound[finite] + 1e-9)


def test_infinite_exactly_across_components() -> None:
    left = np.random.default_rng(2).normal(size=(6, 2))
    points = np.vstack([left, left + 100.0])
    geo = geodesic_all_pairs(build_knn_graph(points, k=5))
    same = geo.component_id[:, None] == geo.component_id[None, :]
    assert np.all(np.isfinite(geo.dist[same]))
    assert np.all(np.isinf(geo.dist[~same]))
    assert geo.component_id.tolist() == [0] * 6 + [1] * 6


def test_threaded_dijkstra_matches_serial() -> None:
    graph = build_knn_graph(np.random.default_rng(9).normal(size=(40, 3)), k=5)
    serial = geodesic_all_pairs(graph, n_jobs=1)
    threaded = geodesic_all_pairs(graph, n_jobs=2)
    assert np.array_equal(serial.dist, threaded.dist)


def test_submatrix_renumbers_components() -> None:
    points = np.vstack([np.zeros((3, 2)) + np.arange(3)[:, None], 50.0 + np.arange(3)[:, None] * np.ones((3, 2))])
    geo = geodesic_all_pairs(build_knn_graph(points, k=1))
    sub = geo.submatrix([4, 5, 0])
    assert sub.component_id.tolist() == [0, 0, 1]
    assert sub.dist.shape == (3, 3)


def test_invalid_inputs_raise() -> None:
    with pytest.raises(ConfigError):
        build_knn_graph(np.zeros((4, 2)), k=4)
    with pytest.raises(ConfigError):
        build_knn_graph(np.zeros((4, 2)), k=0)
    with pytest.raises(DataError):
        build_knn_graph(np.zeros((1, 2)), k=1)
    with pytest.raises(DataError):
        NeighborGraph.from_edges(3, [(0, 0, 1.0)], k=1)
    with pytest.raises(DataError):
        NeighborGraph.from_edges(3, [(0, 1, -1.0)], k=1)
    with pytest.raises(DataError):
        NeighborGraph.from_edges(3, [(0, 5, 1.0)], k=1)


def test_edge_list_export(tmp_path: Path) -> None:
    graph = NeighborGraph.from_edges(3, [(1, 0, 0.5), (1, 2, 2.0)], k=1)
    path = tmp_path / "edges.csv"
    write_edge_list(graph, path)
    assert path.read_text(encoding="utf-8").splitlines() == ["u,v,w", "0,1,0.5", "1,2,2.0"]


def test_geodesics_never_undercut_straight_lines() -> None:
    points = np.random.default_rng(11).normal(size=(40, 3))
    geo = geodesic_all_pairs(build_knn_graph(points, k=4))
    straight = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    assert np.all(geo.dist >= straight - 1e-9)


def test_edge_sets_grow_with_k() -> None:
    points = np.random.default_rng(12).normal(size=(30, 2))
    for k in range(1, 10):
        smaller = set(build_knn_graph(points, k).edges())
        larger = set(build_knn_graph(points, k + 1).edges())
        assert smaller <= larger


def test_geodesics_follow_row_permutation() -> None:
    rng = np.random.default_rng(13)
    points = rng.normal(size=(35, 3))
    order = rng.permutation(35)
    base = geodesic_all_pairs(build_knn_graph(points, k=4))
    shuffled = geodesic_all_pairs(build_knn_graph(points[order], k=4))
    np.testing.assert_allclose(shuffled.dist, base.dist[np.ix_(order, order)], rtol=0, atol=1e-9)
    same = base.component_id[:, None] == base.component_id[None, :]
    assert np.array_equal(shuffled.component_id[:, None] == shuffled.component_id[None, :], same[np.ix_(order, order)])
