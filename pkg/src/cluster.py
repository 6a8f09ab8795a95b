"""Geodesic agglomerative sub-classing and prototype computation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from sklearn.cluster import KMeans

from .config import LINKAGES
from .dataio import LabeledFeatureSet
from .errors import ConfigError, DataError
from .graph import GeodesicMatrix, build_knn_graph, geodesic_all_pairs

CLUSTERINGS = ("agglomerative", "kmeans")


@dataclass(frozen=True, eq=False)
class SubclassPartition:
    """Sub-class index per sample of one class."""

    assignments: np.ndarray
    n_subclasses: int
    class_id: int = 0
    merge_distances: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        assignments = np.asarray(self.assignments, dtype=np.int64).reshape(-1)
        if assignments.size and (assignments.min() < 0 or assignments.max() >= self.n_subclasses):
            raise DataError(f"class {self.class_id}: sub-class index outside [0, {self.n_subclasses})")
        counts = np.bincount(assignments, minlength=self.n_subclasses)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise DataError(f"class {self.class_id}: sub-classes {empty.tolist()} are empty")
        object.__setattr__(self, "assignments", assignments)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.n_subclasses)


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """Mean embedding per sub-class; ``global_rows`` trailing rows hold the class mean."""

    prototypes: np.ndarray
    class_id: int
    member_counts: np.ndarray
    global_rows: int = 0

    @property
    def count(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def local_count(self) -> int:
        return self.count - self.global_rows

    def with_global(self, class_mean: np.ndarray, class_size: int) -> "PrototypeSet":
        return PrototypeSet(
            prototypes=np.vstack([self.prototypes, np.asarray(class_mean, dtype=float)[None, :]]),
            class_id=self.class_id,
            member_counts=np.append(self.member_counts, class_size),
            global_rows=self.global_rows + 1,
        )


def _merge_rows(linkage: str, row_i: np.ndarray, row_j: np.ndarray, size_i: float, size_j: float) -> np.ndarray:
    # Lance-Williams special cases written directly; the generic form yields inf - inf
    if linkage == "single":
        return np.minimum(row_i, row_j)
    if linkage == "complete":
        return np.maximum(row_i, row_j)
    return (size_i * row_i + size_j * row_j) / (size_i + size_j)


def agglomerate(
    matrix: GeodesicMatrix,
    n: int,
    linkage: str = "average",
    class_id: int = 0,
) -> SubclassPartition:
    """Merge singletons bottom-up until ``n`` clusters remain.

    A cluster's id is its smallest member row. Among equal distances the pair
    with the lexicographically smallest ``(min id, max id)`` merges first. Once
    only infinite distances remain (one cluster per graph component), the two
    largest clusters merge, ties going to the smaller id. Sub-class indices
    follow cluster id order.
    """

    size = matrix.size
    if linkage not in LINKAGES:
        raise ConfigError(f"linkage must be one of {LINKAGES} (got {linkage!r})")
    if n < 1 or n > size:
        raise ConfigError(f"class {class_id}: n must satisfy 1 <= n <= N (got n={n}, N={size})")
    dist = np.array(matrix.dist, dtype=float, copy=True)
    np.fill_diagonal(dist, np.inf)
    upper = np.triu(np.ones((size, size), dtype=bool), k=1)
    active = np.ones(size, dtype=bool)
    sizes = np.ones(size, dtype=float)
    membership = np.arange(size)
    heights: List[float] = []
    for _ in range(size - n):
        masked = np.where(upper, dist, np.inf)
        i, j = divmod(int(np.argmin(masked)), size)
        height = float(masked[i, j])
        if not np.isfinite(height):
            live = sorted(np.flatnonzero(active).tolist(), key=lambda c: (-sizes[c], c))
            i, j = sorted(live[:2])
        merged = _merge_rows(linkage, dist[i].copy(), dist[j].copy(), sizes[i], sizes[j])
        dist[i, :] = merged
        dist[:, i] = merged
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        dist[i, i] = np.inf
        sizes[i] += sizes[j]
        active[j] = False
        membership[membership == j] = i
        heights.append(height)
    cluster_ids = np.unique(membership)
    assignments = np.searchsorted(cluster_ids, membership)
    return SubclassPartition(
        assignments=assignments,
        n_subclasses=n,
        class_id=class_id,
        merge_distances=tuple(heights),
    )


def compute_prototypes(features: np.ndarray, partition: SubclassPartition) -> PrototypeSet:
    points = np.asarray(features, dtype=float)
    if points.shape[0] != partition.assignments.size:
        raise DataError(
            f"class {partition.class_id}: {points.shape[0]} feature rows vs {partition.assignments.size} assignments"
        )
    counts = np.bincount(partition.assignments, minlength=partition.n_subclasses)
    if np.any(counts == 0):
        raise DataError(f"class {partition.class_id}: empty sub-class {np.flatnonzero(counts == 0).tolist()}")
    prototypes = np.vstack([points[partition.assignments == j].mean(axis=0) for j in range(partition.n_subclasses)])
    return PrototypeSet(prototypes=prototypes, class_id=partition.class_id, member_counts=counts)


def kmeans_partition(features: np.ndarray, n: int, seed: int, class_id: int = 0) -> SubclassPartition:
    """k-means sub-classes, relabelled by first appearance so indices are stable."""

    points = np.asarray(features, dtype=float)
    if n < 1 or n > points.shape[0]:
        raise ConfigError(f"class {class_id}: n must satisfy 1 <= n <= N (got n={n}, N={points.shape[0]})")
    if n == 1:
        return SubclassPartition(assignments=np.zeros(points.shape[0], dtype=np.int64), n_subclasses=1, class_id=class_id)
    raw = KMeans(n_clusters=n, n_init=10, random_state=seed).fit(points).labels_
    _, first = np.unique(raw, return_index=True)
    relabel = np.empty(n, dtype=np.int64)
    relabel[np.unique(raw)] = np.argsort(np.argsort(first))
    return SubclassPartition(assignments=relabel[raw], n_subclasses=n, class_id=class_id)


@dataclass(frozen=True, eq=False)
class ClassManifold:
    class_id: int
    rows: np.ndarray
    partition: SubclassPartition
    prototypes: PrototypeSet
    components: int


@dataclass(frozen=True, eq=False)
class ManifoldState:
    """Per-class partitions and prototypes for one refresh of the training set."""

    classes: Tuple[ClassManifold, ...]
    assignments: np.ndarray

    def prototypes_by_class(self) -> List[PrototypeSet]:
        return [entry.prototypes for entry in self.classes]

    @property
    def prototype_count(self) -> int:
        return sum(entry.prototypes.count for entry in self.classes)

    def summary(self) -> Dict[str, object]:
        finite = [h for entry in self.classes for h in entry.partition.merge_distances if np.isfinite(h)]
        return {
            "prototypes": self.prototype_count,
            "per_class": [entry.prototypes.count for entry in self.classes],
            "components": [entry.components for entry in self.classes],
            "max_merge": max(finite) if finite else 0.0,
        }


def _refresh_class(
    label: int,
    rows: np.ndarray,
    embeddings: np.ndarray,
    k: int,
    n: int,
    linkage: str,
    clustering: str,
    global_matrix: Optional[GeodesicMatrix],
    seed: int,
) -> Tuple[SubclassPartition, int]:
    points = embeddings[rows]
    if clustering == "kmeans":
        return kmeans_partition(points, n, seed, class_id=label), 1
    if global_matrix is not None:
        matrix = global_matrix.submatrix(rows)
    else:
        if rows.size <= k:
            raise ConfigError(f"class {label}: k={k} needs more than {k} samples (got {rows.size})")
        matrix = geodesic_all_pairs(build_knn_graph(points, k))
    components = int(matrix.component_id.max()) + 1 if matrix.size else 0
    return agglomerate(matrix, n, linkage, class_id=label), components


def refresh_manifold(
    feature_set: LabeledFeatureSet,
    embeddings: np.ndarray,
    k: int,
    n: int,
    linkage: str = "average",
    clustering: str = "agglomerative",
    prototype_mode: str = "local",
    global_graph: bool = False,
    n_jobs: int = 1,
    seed: int = 0,
) -> ManifoldState:
    """kNN graph -> geodesics -> sub-classes -> prototypes, per class, on current embeddings."""

    points = np.asarray(embeddings, dtype=float)
    if points.ndim != 2 or points.shape[0] != feature_set.size:
        raise DataError(f"embeddings shape {points.shape} is not row-aligned with {feature_set.size} samples")
    if clustering not in CLUSTERINGS:
        raise ConfigError(f"clustering must be one of {CLUSTERINGS} (got {clustering!r})")
    classes = feature_set.classes
    if classes != list(range(len(classes))):
        raise DataError(f"class labels must be contiguous from 0 (got {classes})")
    subclasses = 1 if prototype_mode == "global" else n
    class_rows = [feature_set.class_indices(label) for label in classes]
    for label, rows in zip(classes, class_rows):
        if rows.size < subclasses:
            raise ConfigError(f"class {label} has {rows.size} samples, fewer than n={subclasses}")
    global_matrix = None
    if global_graph and clustering == "agglomerative":
        global_matrix = geodesic_all_pairs(build_knn_graph(points, k), n_jobs=n_jobs)
    jobs = (
        delayed(_refresh_class)(label, rows, points, k, subclasses, linkage, clustering, global_matrix, seed)
        for label, rows in zip(classes, class_rows)
    )
    if n_jobs == 1:
        results = [fn(*args, **kwargs) for fn, args, kwargs in jobs]
    else:
        results = Parallel(n_jobs=n_jobs, prefer="threads")(jobs)
    entries: List[ClassManifold] = []
    assignments = np.zeros(feature_set.size, dtype=np.int64)
    for label, rows, (partition, components) in zip(classes, class_rows, results):
        prototypes = compute_prototypes(points[rows], partition)
        if prototype_mode == "hierarchical":
            prototypes = prototypes.with_global(points[rows].mean(axis=0), rows.size)
        assignments[rows] = partition.assignments
        entries.append(ClassManifold(label, rows, partition, prototypes, components))
    return ManifoldState(classes=tuple(entries), assignments=assignments)


def write_partition(state: ManifoldState, path: Union[str, Path]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(
        (int(row), entry.class_id, int(sub))
        for entry in state.classes
        for row, sub in zip(entry.rows, entry.partition.assignments)
    )
    with p.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["row_index", "class", "subclass"])
        writer.writerows(rows)


def write_prototypes(state: ManifoldState, path: Union[str, Path]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    dim = state.classes[0].prototypes.prototypes.shape[1] if state.classes else 0
    with p.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["class", "subclass"] + [f"f{j}" for j in range(dim)])
        for entry in state.classes:
            for sub, row in enumerate(entry.prototypes.prototypes):
                writer.writerow([entry.class_id, sub, *(repr(float(value)) for value in row)])


__all__ = [
    "CLUSTERINGS",
    "SubclassPartition",
    "PrototypeSet",
    "ClassManifold",
    "ManifoldState",
    "agglomerate",
    "compute_prototypes",
    "kmeans_partition",
    "refresh_manifold",
    "write_partition",
    "write_prototypes",
]
