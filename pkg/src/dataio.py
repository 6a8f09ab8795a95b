"""Feature tables, the interleaved-manifold generator and group-level splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError, FeatureTableError

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class LabeledFeatureSet:
    """Row-aligned features, class labels and slide/group identifiers."""

    features: np.ndarray
    labels: np.ndarray
    group_ids: Tuple[str, ...]
    n_classes: Optional[int] = None

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=float, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        groups = tuple(str(group) for group in self.group_ids)
        if features.ndim != 2:
            raise DataError(f"features must be a 2-D matrix (got shape {features.shape})")
        if features.shape[1] < 1:
            raise DataError("features need at least one column")
        if not np.all(np.isfinite(features)):
            row = int(np.argwhere(~np.isfinite(features))[0][0])
            raise DataError(f"features contain NaN/Inf (first at row {row})")
        n_rows = features.shape[0]
        if labels.size != n_rows or len(groups) != n_rows:
            raise DataError(
                f"features ({n_rows} rows), labels ({labels.size}) and group_ids ({len(groups)}) must align"
            )
        if labels.size and labels.min() < 0:
            raise DataError("class labels must be >= 0")
        if self.n_classes is not None:
            if labels.size and labels.max() >= self.n_classes:
                raise DataError(f"label {int(labels.max())} outside [0, {self.n_classes})")
            missing = sorted(set(range(self.n_classes)) - set(labels.tolist()))
            if missing:
                raise DataError(f"declared classes {missing} have no samples")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "group_ids", groups)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_classes(self) -> int:
        if self.n_classes is not None:
            return self.n_classes
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def classes(self) -> List[int]:
        return sorted(set(self.labels.tolist()))

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, indices: Sequence[int]) -> "LabeledFeatureSet":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledFeatureSet(
            features=self.features[idx],
            labels=self.labels[idx],
            group_ids=tuple(self.group_ids[i] for i in idx),
        )

    def with_features(self, features: np.ndarray) -> "LabeledFeatureSet":
        """Same labels and groups over a new row-aligned matrix (e.g. embeddings)."""

        return LabeledFeatureSet(features=features, labels=self.labels, group_ids=self.group_ids, n_classes=self.n_classes)

    def groups(self) -> Dict[str, np.ndarray]:
        """Row indices per group id, in order of first appearance."""

        order: Dict[str, List[int]] = {}
        for row, group in enumerate(self.group_ids):
            order.setdefault(group, []).append(row)
        return {group: np.asarray(rows, dtype=np.int64) for group, rows in order.items()}

    def group_label(self, rows: np.ndarray) -> int:
        """Majority label of a group; ties resolve to the lower class index."""

        counts = np.bincount(self.labels[rows])
        return int(np.argmax(counts))


def _header(dim: int) -> List[str]:
    return ["group_id", "label"] + [f"f{j}" for j in range(dim)]


def load_feature_table(path: PathLike) -> LabeledFeatureSet:
    """Parse ``group_id,label,f0..f{D-1}`` rows; row order is preserved."""

    p = Path(path)
    try:
        handle = p.open("r", encoding="utf-8-sig", newline="")
    except OSError as exc:
        raise FeatureTableError(p, None, f"cannot open feature table ({exc})") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header:
            raise FeatureTableError(p, 1, "empty file (expected a group_id,label,f0,... header)")
        dim = len(header) - 2
        if dim < 1 or header != _header(dim):
            raise FeatureTableError(p, 1, f"bad header {header!r}; expected group_id,label,f0,...")
        groups: List[str] = []
        labels: List[int] = []
        rows: List[List[float]] = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != dim + 2:
                raise FeatureTableError(p, line, f"expected {dim + 2} columns, found {len(row)}")
            try:
                label = int(row[1])
            except ValueError:
                raise FeatureTableError(p, line, f"label {row[1]!r} is not an integer") from None
            values: List[float] = []
            for column, cell in enumerate(row[2:]):
                try:
                    value = float(cell)
                except ValueError:
                    raise FeatureTableError(p, line, f"f{column}={cell!r} is not numeric") from None
                if not math.isfinite(value):
                    raise FeatureTableError(p, line, f"f{column}={cell!r} is not finite")
                values.append(value)
            if label < 0:
                raise FeatureTableError(p, line, f"label {label} is negative")
            groups.append(row[0])
            labels.append(label)
            rows.append(values)
    features = np.asarray(rows, dtype=float).reshape(len(rows), dim)
    return LabeledFeatureSet(features=features, labels=np.asarray(labels, dtype=np.int64), group_ids=tuple(groups))


def save_feature_table(feature_set: LabeledFeatureSet, path: PathLike) -> None:
    """Write the CSV schema; floats use ``repr`` so a reload is value-exact."""

    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(_header(feature_set.dim))
            for group, label, row in zip(feature_set.group_ids, feature_set.labels, feature_set.features):
                writer.writerow([group, int(label), *(repr(float(value)) for value in row)])
    except OSError as exc:
        raise FeatureTableError(p, None, f"cannot write feature table ({exc})") from exc


def gen_interleaved_manifolds(
    n_per_class: int,
    noise: float,
    turns: float,
    seed: int,
    groups_per_class: int = 10,
    height: float = 0.3,
    lift_dim: Optional[int] = None,
) -> LabeledFeatureSet:
    """Two interleaved swiss-roll strips in 3-D, one per class.

    Class ``c`` follows the Archimedean spiral ``r = theta / 2pi`` rotated by
    ``c * pi``, so arms of opposite classes sit half a unit apart. Angles are
    drawn uniformly in ``theta**2``, which spreads points evenly by arc length.
    Each point is dealt into one of ``groups_per_class`` slides by a shuffled
    round robin, so every slide covers the whole roll and slide sizes differ by
    at most one. With ``lift_dim`` the data is zero-padded and randomly rotated
    into that many dimensions.
    """

    if n_per_class < 4:
        raise ConfigError(f"n_per_class must be >= 4 (got {n_per_class})")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0 (got {noise})")
    if not 1 <= groups_per_class <= n_per_class:
        raise ConfigError(f"groups_per_class must lie in [1, {n_per_class}] (got {groups_per_class})")
    rng = np.random.default_rng(seed)
    start = 0.5 * np.pi
    stop = start + 2.0 * np.pi * turns
    blocks: List[np.ndarray] = []
    labels: List[int] = []
    groups: List[str] = []
    for label in (0, 1):
        s = np.sort(rng.uniform(0.0, 1.0, n_per_class))
        theta = np.sqrt(start**2 + s * (stop**2 - start**2))
        radius = theta / (2.0 * np.pi)
        phase = np.pi * label
        strip = np.column_stack(
            [
                radius * np.cos(theta + phase),
                height * rng.uniform(0.0, 1.0, n_per_class),
                radius * np.sin(theta + phase),
            ]
        )
        strip = strip + noise * rng.normal(size=strip.shape)
        blocks.append(strip)
        labels.extend([label] * n_per_class)
        slides = rng.permutation(n_per_class) % groups_per_class
        groups.extend(f"c{label}-s{slide:02d}" for slide in slides)
    features = np.vstack(blocks)
    if lift_dim is not None:
        if lift_dim < 3:
            raise ConfigError(f"lift_dim must be >= 3 (got {lift_dim})")
        padded = np.zeros((features.shape[0], lift_dim))
        padded[:, :3] = features
        rotation, _ = np.linalg.qr(rng.normal(size=(lift_dim, lift_dim)))
        features = padded @ rotation.T
    return LabeledFeatureSet(features=features, labels=np.asarray(labels), group_ids=tuple(groups), n_classes=2)


def _train_quotas(counts: List[int], fraction: float) -> List[int]:
    target = int(math.floor(fraction * sum(counts) + 0.5))
    raw = [fraction * count for count in counts]
    quotas = [int(math.floor(value)) for value in raw]
    order = sorted(range(len(counts)), key=lambda i: (-(raw[i] - quotas[i]), i))
    for i in order[: max(0, target - sum(quotas))]:
        quotas[i] += 1
    return [min(max(quota, 1), count - 1) for quota, count in zip(quotas, counts)]


def split_by_group(
    feature_set: LabeledFeatureSet,
    train_fraction: float,
    seed: int,
) -> Tuple[LabeledFeatureSet, LabeledFeatureSet]:
    """Stratified slide-level split: no group id lands in both halves."""

    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1) (got {train_fraction})")
    groups = feature_set.groups()
    by_class: Dict[int, List[str]] = {}
    for group, rows in groups.items():
        by_class.setdefault(feature_set.group_label(rows), []).append(group)
    classes = sorted(by_class)
    for label in classes:
        if len(by_class[label]) < 2:
            raise DataError(f"class {label} has {len(by_class[label])} group(s); a stratified split needs >= 2")
    quotas = _train_quotas([len(by_class[label]) for label in classes], train_fraction)
    rng = np.random.default_rng(seed)
    train_groups = set()
    for label, quota in zip(classes, quotas):
        ordered = sorted(by_class[label])
        picked = rng.permutation(len(ordered))[:quota]
        train_groups.update(ordered[i] for i in picked)
    in_train = np.array([group in train_groups for group in feature_set.group_ids], dtype=bool)
    return feature_set.subset(np.flatnonzero(in_train)), feature_set.subset(np.flatnonzero(~in_train))


__all__ = [
    "LabeledFeatureSet",
    "load_feature_table",
    "save_feature_table",
    "gen_interleaved_manifolds",
    "split_by_group",
]
