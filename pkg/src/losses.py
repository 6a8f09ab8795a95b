"""Manifold, cross-entropy and cosine prototype losses with analytic gradients.

Every loss is evaluated on one mini-batch; averaging over batches happens
across optimizer steps. Prototypes are constants: no gradient flows into them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .cluster import PrototypeSet
from .config import LossConfig
from .errors import AssignmentError, ConfigError, DataError, NumericError

EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Batch:
    """Embeddings of one mini-batch with class and sub-class indices per row."""

    embeddings: np.ndarray
    class_labels: np.ndarray
    subclass_assignments: np.ndarray

    def __post_init__(self) -> None:
        embeddings = np.asarray(self.embeddings, dtype=float)
        labels = np.asarray(self.class_labels, dtype=np.int64).reshape(-1)
        subs = np.asarray(self.subclass_assignments, dtype=np.int64).reshape(-1)
        if embeddings.ndim != 2 or labels.size != embeddings.shape[0] or subs.size != embeddings.shape[0]:
            raise DataError(
                f"batch shapes disagree: embeddings {embeddings.shape}, labels {labels.shape}, assignments {subs.shape}"
            )
        if not np.all(np.isfinite(embeddings)):
            raise NumericError("batch embeddings contain NaN/Inf")
        object.__setattr__(self, "embeddings", embeddings)
        object.__setattr__(self, "class_labels", labels)
        object.__setattr__(self, "subclass_assignments", subs)

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])


@dataclass(frozen=True, eq=False)
class LossValue:
    """Scalar loss plus its gradient w.r.t. embeddings and/or probabilities."""

    value: float
    grad_embeddings: Optional[np.ndarray] = None
    grad_probabilities: Optional[np.ndarray] = None
    parts: Mapping[str, float] = field(default_factory=dict)

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(
            value=self.value + other.value,
            grad_embeddings=_add_grads(self.grad_embeddings, other.grad_embeddings),
            grad_probabilities=_add_grads(self.grad_probabilities, other.grad_probabilities),
            parts={**self.parts, **other.parts},
        )


def _add_grads(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return b
    if b is None:
        return a
    if a.shape != b.shape:
        raise DataError(f"cannot add gradients of shapes {a.shape} and {b.shape}")
    return a + b


def _positive_prototypes(batch: Batch, prototypes_by_class: Sequence[PrototypeSet]) -> np.ndarray:
    out = np.empty_like(batch.embeddings)
    for row, (label, sub) in enumerate(zip(batch.class_labels, batch.subclass_assignments)):
        if not 0 <= label < len(prototypes_by_class):
            raise AssignmentError(f"row {row}: class {label} has no prototype set")
        protos = prototypes_by_class[label]
        if not 0 <= sub < protos.count:
            raise AssignmentError(f"row {row}: class {label} has no sub-class {sub} ({protos.count} prototypes)")
        out[row] = protos.prototypes[sub]
    return out


def intra_loss(batch: Batch, prototypes_by_class: Sequence[PrototypeSet]) -> LossValue:
    """Mean squared distance of each embedding to its own sub-class prototype."""

    if batch.size == 0:
        return LossValue(0.0, np.zeros_like(batch.embeddings), parts={"intra": 0.0})
    diff = batch.embeddings - _positive_prototypes(batch, prototypes_by_class)
    value = float(np.sum(diff * diff) / batch.size)
    return LossValue(value, 2.0 * diff / batch.size, parts={"intra": value})


def hausdorff(points_y: np.ndarray, points_z: np.ndarray) -> Tuple[float, Tuple[int, int]]:
    """Hausdorff distance and the ``(y index, z index)`` pair attaining it.

    The Y->Z direction wins ties with Z->Y; inside a direction the first
    index in scan order wins.
    """

    y = np.asarray(points_y, dtype=float)
    z = np.asarray(points_z, dtype=float)
    if y.ndim != 2 or z.ndim != 2 or y.shape[0] == 0 or z.shape[0] == 0:
        raise DataError(f"hausdorff needs two non-empty point sets (got {y.shape} and {z.shape})")
    dist = cdist(y, z)
    to_z = dist.min(axis=1)
    y_far = int(np.argmax(to_z))
    to_y = dist.min(axis=0)
    z_far = int(np.argmax(to_y))
    if to_z[y_far] >= to_y[z_far]:
        return float(to_z[y_far]), (y_far, int(np.argmin(dist[y_far])))
    return float(to_y[z_far]), (int(np.argmin(dist[:, z_far])), z_far)


def inter_loss(batch: Batch, prototypes_by_class: Sequence[PrototypeSet], cfg: LossConfig) -> LossValue:
    """Margin minus Hausdorff distance between each class's batch rows and every other class's prototypes.

    Terms are averaged over ordered class pairs ``(A, B)`` with ``A`` present in
    the batch; the subgradient touches only the witness embedding of each term.
    """

    if len(prototypes_by_class) < 2:
        raise ConfigError("inter-subclass loss needs prototypes for at least two classes")
    grad = np.zeros_like(batch.embeddings)
    present = sorted(set(batch.class_labels.tolist()))
    pairs = [(a, b) for a in present for b in range(len(prototypes_by_class)) if b != a]
    if not pairs:
        return LossValue(0.0, grad, parts={"inter": 0.0})
    total = 0.0
    for a, b in pairs:
        rows = np.flatnonzero(batch.class_labels == a)
        targets = prototypes_by_class[b].prototypes
        distance, (y_idx, z_idx) = hausdorff(batch.embeddings[rows], targets)
        term = cfg.margin - distance
        if cfg.inter_clamp and term <= 0.0:
            continue
        total += term
        offset = batch.embeddings[rows[y_idx]] - targets[z_idx]
        norm = float(np.linalg.norm(offset))
        if norm > 0.0:
            grad[rows[y_idx]] -= offset / norm / len(pairs)
    value = total / len(pairs)
    return LossValue(value, grad, parts={"inter": value})


def manifold_loss(batch: Batch, prototypes_by_class: Sequence[PrototypeSet], cfg: LossConfig) -> LossValue:
    return intra_loss(batch, prototypes_by_class) + inter_loss(batch, prototypes_by_class, cfg)


def cross_entropy(probabilities: np.ndarray, labels: np.ndarray) -> LossValue:
    """Binary form for two classes, categorical otherwise.

    Probabilities are clamped to ``[eps, 1 - eps]``; the gradient is w.r.t. the
    probability matrix. The binary ``1 - y_hat`` term reads the class-0 column
    directly, which equals ``1 - y_hat`` on softmax rows without the cancellation
    of computing it by subtraction.
    """

    probs = np.asarray(probabilities, dtype=float)
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] != targets.size:
        raise DataError(f"probabilities {probs.shape} do not match {targets.size} labels")
    if not np.all(np.isfinite(probs)):
        raise NumericError("probabilities contain NaN/Inf")
    rows, n_classes = probs.shape
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise AssignmentError(f"label outside [0, {n_classes})")
    grad = np.zeros_like(probs)
    if rows == 0:
        return LossValue(0.0, grad_probabilities=grad, parts={"ce": 0.0})
    clipped = np.clip(probs, EPS, 1.0 - EPS)
    if n_classes == 2:
        y = targets.astype(float)
        y_hat, y_other = clipped[:, 1], clipped[:, 0]
        value = float(-np.mean(y * np.log(y_hat) + (1.0 - y) * np.log(y_other)))
        grad[:, 1] = -y / (rows * y_hat)
        grad[:, 0] = -(1.0 - y) / (rows * y_other)
    else:
        picked = clipped[np.arange(rows), targets]
        value = float(-np.mean(np.log(picked)))
        grad[np.arange(rows), targets] = -1.0 / (rows * picked)
    return LossValue(value, grad_probabilities=grad, parts={"ce": value})


def cosine_prototype_loss(batch: Batch, prototypes_by_class: Sequence[PrototypeSet], cfg: LossConfig) -> LossValue:
    """NT-Xent over prototypes: softmax of cosine/temperature, positive = own sub-class prototype."""

    if batch.size == 0:
        return LossValue(0.0, np.zeros_like(batch.embeddings), parts={"cosine": 0.0})
    _positive_prototypes(batch, prototypes_by_class)
    offsets = np.cumsum([0] + [protos.count for protos in prototypes_by_class])
    positives = offsets[batch.class_labels] + batch.subclass_assignments
    bank = np.vstack([protos.prototypes for protos in prototypes_by_class])
    emb_norm = np.linalg.norm(batch.embeddings, axis=1)
    bank_norm = np.linalg.norm(bank, axis=1)
    if np.any(emb_norm == 0.0):
        raise NumericError(f"zero-norm embedding at batch rows {np.flatnonzero(emb_norm == 0.0).tolist()}")
    if np.any(bank_norm == 0.0):
        raise NumericError("zero-norm prototype in cosine loss")
    unit = batch.embeddings / emb_norm[:, None]
    bank_unit = bank / bank_norm[:, None]
    cosine = unit @ bank_unit.T
    logits = cosine / cfg.temperature
    shift = logits.max(axis=1, keepdims=True)
    log_norm = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    rows = np.arange(batch.size)
    value = float(np.mean(log_norm - logits[rows, positives]))
    weights = np.exp(logits - log_norm[:, None])
    weights[rows, positives] -= 1.0
    d_cos = weights / (cfg.temperature * batch.size)
    radial = np.sum(d_cos * cosine, axis=1)
    grad = (d_cos @ bank_unit - radial[:, None] * unit) / emb_norm[:, None]
    return LossValue(value, grad, parts={"cosine": value})


def total_loss(
    batch: Batch,
    prototypes_by_class: Sequence[PrototypeSet],
    probabilities: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    objective: str = "geodesic",
) -> LossValue:
    """Embedding-path loss plus softmax-path cross-entropy.

    ``geodesic`` uses the manifold loss, ``cosine`` the prototype NT-Xent
    baseline.
    """

    ce = cross_entropy(probabilities, labels)
    if objective == "geodesic":
        embedding_path = manifold_loss(batch, prototypes_by_class, cfg)
    elif objective == "cosine":
        embedding_path = cosine_prototype_loss(batch, prototypes_by_class, cfg)
    else:
        raise ConfigError(f"objective {objective!r} has no embedding-path loss")
    return embedding_path + ce


__all__ = [
    "Batch",
    "LossValue",
    "intra_loss",
    "hausdorff",
    "inter_loss",
    "manifold_loss",
    "cross_entropy",
    "cosine_prototype_loss",
    "total_loss",
]
