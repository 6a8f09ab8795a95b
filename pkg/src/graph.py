"""Per-class kNN graphs and all-pairs geodesic distances via Dijkstra."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError

Edge = Tuple[int, int, float]


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Undirected weighted graph; ``adjacency[u]`` lists ``(v, w)`` sorted by ``v``."""

    node_count: int
    adjacency: Tuple[Tuple[Tuple[int, float], ...], ...]
    k: int

    @classmethod
    def from_edges(cls, node_count: int, edges: Iterable[Edge], k: int) -> "NeighborGraph":
        table: List[Dict[int, float]] = [{} for _ in range(node_count)]
        for u, v, w in edges:
            u, v, w = int(u), int(v), float(w)
            if not (0 <= u < node_count and 0 <= v < node_count):
                raise DataError(f"edge ({u}, {v}) references a node outside [0, {node_count})")
            if u == v:
                raise DataError(f"self-loop on node {u}")
            if not math.isfinite(w) or w < 0:
                raise DataError(f"edge ({u}, {v}) has invalid weight {w}")
            if v in table[u] and table[u][v] != w:
                raise DataError(f"edge ({u}, {v}) given twice with different weights")
            table[u][v] = w
            table[v][u] = w
        adjacency = tuple(tuple(sorted(row.items())) for row in table)
        return cls(node_count=node_count, adjacency=adjacency, k=k)

    def edges(self) -> List[Edge]:
        """Each undirected edge once, as ``(u, v, w)`` with ``u < v``."""

        return [(u, v, w) for u, row in enumerate(self.adjacency) for v, w in row if u < v]

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])


@dataclass(frozen=True, eq=False)
class GeodesicMatrix:
    """Shortest-path lengths; ``+inf`` exactly between different components."""

    dist: np.ndarray
    component_id: np.ndarray

    @property
    def size(self) -> int:
        return int(self.dist.shape[0])

    def submatrix(self, indices: Sequence[int]) -> "GeodesicMatrix":
        idx = np.asarray(indices, dtype=np.int64)
        _, first, inverse = np.unique(self.component_id[idx], return_index=True, return_inverse=True)
        # renumber so the component holding the smallest row comes first
        rank = np.argsort(np.argsort(first))
        return GeodesicMatrix(dist=self.dist[np.ix_(idx, idx)].copy(), component_id=rank[inverse])


def build_knn_graph(features: np.ndarray, k: int) -> NeighborGraph:
    """Connect every node to its ``k`` nearest Euclidean neighbours, symmetrised by union.

    Equal distances go to the lower node index; duplicate points give
    zero-weight edges.
    """

    points = np.asarray(features, dtype=float)
    if points.ndim != 2 or points.shape[0] < 2:
        raise DataError(f"kNN graph needs an N x D matrix with N >= 2 (got shape {points.shape})")
    n_nodes = points.shape[0]
    if k < 1 or k >= n_nodes:
        raise ConfigError(f"k must satisfy 1 <= k < N (got k={k}, N={n_nodes})")
    dist = cdist(points, points)
    np.fill_diagonal(dist, np.inf)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    undirected: Dict[Tuple[int, int], float] = {}
    for u in range(n_nodes):
        for v in nearest[u]:
            a, b = (u, int(v)) if u < v else (int(v), u)
            undirected[(a, b)] = float(dist[a, b])
    return NeighborGraph.from_edges(n_nodes, ((a, b, w) for (a, b), w in sorted(undirected.items())), k)


def connected_components(graph: NeighborGraph) -> np.ndarray:
    """Component label per node, numbered in order of each component's smallest node."""

    labels = np.full(graph.node_count, -1, dtype=np.int64)
    current = 0
    for start in range(graph.node_count):
        if labels[start] >= 0:
            continue
        labels[start] = current
        stack = [start]
        while stack:
            u = stack.pop()
            for v, _ in graph.adjacency[u]:
                if labels[v] < 0:
                    labels[v] = current
                    stack.append(v)
        current += 1
    return labels


def _dijkstra(adjacency: Sequence[Sequence[Tuple[int, float]]], source: int) -> np.ndarray:
    dist = [math.inf] * len(adjacency)
    dist[source] = 0.0
    settled = [False] * len(adjacency)
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if settled[u]:
            continue
        settled[u] = True
        for v, w in adjacency[u]:
            candidate = d + w
            if candidate < dist[v]:
                dist[v] = candidate
                heapq.heappush(heap, (candidate, v))
    return np.asarray(dist, dtype=float)


def geodesic_all_pairs(graph: NeighborGraph, n_jobs: int = 1) -> GeodesicMatrix:
    """Dijkstra from every source; rows are gathered in source order."""

    if graph.node_count == 0:
        return GeodesicMatrix(dist=np.zeros((0, 0)), component_id=np.zeros(0, dtype=np.int64))
    sources = range(graph.node_count)
    if n_jobs == 1:
        rows = [_dijkstra(graph.adjacency, source) for source in sources]
    else:
        rows = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_dijkstra)(graph.adjacency, source) for source in sources
        )
    dist = np.vstack(rows)
    # the two directions of a path may round differently
    dist = np.minimum(dist, dist.T)
    np.fill_diagonal(dist, 0.0)
    return GeodesicMatrix(dist=dist, component_id=connected_components(graph))


def write_edge_list(graph: NeighborGraph, path: Union[str, Path]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = ["u,v,w"] + [f"{u},{v},{w!r}" for u, v, w in graph.edges()]
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")


__all__ = [
    "NeighborGraph",
    "GeodesicMatrix",
    "build_knn_graph",
    "connected_components",
    "geodesic_all_pairs",
    "write_edge_list",
]
