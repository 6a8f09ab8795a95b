"""Stage-2 multiple-instance classification over bags of slide embeddings."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import MilConfig
from .dataio import LabeledFeatureSet
from .errors import ConfigError, DataError
from .losses import cross_entropy
from .nn import (
    DenseLayer,
    LayerGrad,
    TrunkCache,
    check_finite,
    dense_backward,
    he_uniform,
    sgd_update,
    softmax,
    softmax_backward,
    stratified_batches,
    trunk_backward,
    trunk_forward,
)
from .run_log import NULL_LOG, RunLog

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class MilBag:
    bag_vector: np.ndarray
    slide_id: str
    label: int

    def __post_init__(self) -> None:
        vector = np.asarray(self.bag_vector, dtype=float).reshape(-1)
        if not np.all(np.isfinite(vector)):
            raise DataError(f"bag of slide {self.slide_id!r} contains NaN/Inf")
        object.__setattr__(self, "bag_vector", vector)

    def to_record(self) -> Dict[str, object]:
        return {"slide_id": self.slide_id, "label": int(self.label), "bag": self.bag_vector.tolist()}

    @classmethod
    def from_record(cls, record: Dict[str, object]) -> "MilBag":
        return cls(bag_vector=np.asarray(record["bag"], dtype=float), slide_id=str(record["slide_id"]), label=int(record["label"]))


@dataclass(frozen=True)
class SlidePrediction:
    slide_id: str
    bag_predictions: Tuple[int, ...]
    final_label: int
    vote_fraction: float


@dataclass(frozen=True, eq=False)
class MilClassifier:
    """``bag_dim -> hidden -> hidden -> C`` with ReLU and a softmax output."""

    hidden: Tuple[DenseLayer, ...]
    output: DenseLayer

    @property
    def bag_dim(self) -> int:
        return self.hidden[0].fan_in

    @property
    def n_classes(self) -> int:
        return self.output.fan_out

    def layers(self) -> List[DenseLayer]:
        return [*self.hidden, self.output]

    @classmethod
    def from_layers(cls, layers: Sequence[DenseLayer]) -> "MilClassifier":
        layers = list(layers)
        if len(layers) < 2:
            raise ConfigError(f"bag classifier needs hidden layers and an output layer (got {len(layers)})")
        for before, after in zip(layers, layers[1:]):
            if before.fan_out != after.fan_in:
                raise ConfigError(f"layer {after.name} expects {after.fan_in} inputs but receives {before.fan_out}")
        return cls(hidden=tuple(layers[:-1]), output=layers[-1])


def _slide_offset(slide_id: str) -> int:
    digest = hashlib.sha256(slide_id.encode("utf-8")).hexdigest()[:8]
    return int(digest, 16)


def make_bags(
    embeddings: np.ndarray,
    slide_id: str,
    label: int,
    cfg: MilConfig,
    seed: Optional[int] = None,
) -> List[MilBag]:
    """``bags_per_slide`` bags of ``patches_per_bag`` rows each, deterministic per (seed, slide).

    Rows are drawn without replacement when the slide has enough of them and
    with replacement otherwise. ``concat`` pooling keeps the sampled order.
    """

    points = np.asarray(embeddings, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0:
        raise DataError(f"slide {slide_id!r} has no embeddings to bag (shape {points.shape})")
    rng = np.random.default_rng([cfg.seed if seed is None else seed, _slide_offset(slide_id)])
    replace = points.shape[0] < cfg.patches_per_bag
    bags = []
    for _ in range(cfg.bags_per_slide):
        picked = points[rng.choice(points.shape[0], size=cfg.patches_per_bag, replace=replace)]
        vector = picked.reshape(-1) if cfg.pooling == "concat" else picked.mean(axis=0)
        bags.append(MilBag(bag_vector=vector, slide_id=slide_id, label=int(label)))
    return bags


def bags_for_set(embedded: LabeledFeatureSet, cfg: MilConfig, seed: Optional[int] = None) -> List[MilBag]:
    """Bags for every slide in order of first appearance; slide label is the majority row label."""

    bags: List[MilBag] = []
    for slide_id, rows in embedded.groups().items():
        bags.extend(make_bags(embedded.features[rows], slide_id, embedded.group_label(rows), cfg, seed))
    return bags


def stack_bags(bags: Sequence[MilBag]) -> Tuple[np.ndarray, np.ndarray]:
    if not bags:
        raise DataError("no bags given")
    widths = {bag.bag_vector.size for bag in bags}
    if len(widths) != 1:
        raise DataError(f"bags have differing lengths {sorted(widths)}")
    return np.vstack([bag.bag_vector for bag in bags]), np.asarray([bag.label for bag in bags], dtype=np.int64)


def init_classifier(bag_dim: int, hidden: int, n_classes: int, seed: int) -> MilClassifier:
    rng = np.random.default_rng(seed)
    first = he_uniform(rng, bag_dim, hidden, "mil.0")
    second = he_uniform(rng, hidden, hidden, "mil.1")
    return MilClassifier(hidden=(first, second), output=he_uniform(rng, hidden, n_classes, "mil.out"))


def classifier_forward(classifier: MilClassifier, inputs: np.ndarray) -> Tuple[np.ndarray, TrunkCache]:
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != classifier.bag_dim:
        raise DataError(f"classifier expects bags of length {classifier.bag_dim} (got shape {x.shape})")
    cache = trunk_forward(classifier.hidden, x)
    logits = check_finite(classifier.output.forward(cache.output), classifier.output.name)
    return softmax(logits), cache


def classifier_backward(
    classifier: MilClassifier,
    cache: TrunkCache,
    probabilities: np.ndarray,
    grad_probabilities: np.ndarray,
) -> List[LayerGrad]:
    grad_logits = softmax_backward(probabilities, grad_probabilities)
    output_grad, grad_hidden = dense_backward(classifier.output, cache.output, grad_logits)
    return [*trunk_backward(classifier.hidden, cache, grad_hidden), output_grad]


def train_mil(bags: Sequence[MilBag], cfg: MilConfig, log: RunLog = NULL_LOG) -> MilClassifier:
    """Cross-entropy SGD over bag vectors; deterministic per ``cfg.seed``."""

    cfg.validate()
    inputs, labels = stack_bags(bags)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ConfigError(f"bag classifier needs at least two classes among bag labels (got {classes})")
    classifier = init_classifier(inputs.shape[1], cfg.classifier_hidden, classes[-1] + 1, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    step = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for rows in stratified_batches(labels, cfg.batch_size, rng):
            probabilities, cache = classifier_forward(classifier, inputs[rows])
            loss = cross_entropy(probabilities, labels[rows])
            grads = classifier_backward(classifier, cache, probabilities, loss.grad_probabilities)
            classifier = MilClassifier.from_layers(
                sgd_update(classifier.layers(), grads, cfg.lr, cfg.decay, step)
            )
            total += loss.value * rows.size
            step += 1
        probabilities, _ = classifier_forward(classifier, inputs)
        accuracy = float(np.mean(np.argmax(probabilities, axis=1) == labels))
        log.event("mil_epoch", epoch=epoch + 1, l_ce=total / labels.size, train_acc=accuracy)
    return classifier


def vote(bag_probabilities: np.ndarray, slide_id: str) -> SlidePrediction:
    """Majority vote over bag argmaxes.

    Ties go to the tied class with the higher mean probability across bags,
    then to the lower class index.
    """

    probs = np.asarray(bag_probabilities, dtype=float)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise DataError(f"slide {slide_id!r}: no bag probabilities to vote on")
    predictions = np.argmax(probs, axis=1)
    counts = np.bincount(predictions, minlength=probs.shape[1])
    tied = np.flatnonzero(counts == counts.max())
    mean = probs.mean(axis=0)
    final = int(tied[np.argmax(mean[tied])])
    return SlidePrediction(
        slide_id=slide_id,
        bag_predictions=tuple(int(p) for p in predictions),
        final_label=final,
        vote_fraction=float(counts[final] / predictions.size),
    )


def predict_slide(classifier: MilClassifier, bags: Sequence[MilBag]) -> SlidePrediction:
    slides = {bag.slide_id for bag in bags}
    if len(slides) != 1:
        raise DataError(f"predict_slide needs bags of exactly one slide (got {sorted(slides)})")
    inputs, _ = stack_bags(bags)
    probabilities, _ = classifier_forward(classifier, inputs)
    return vote(probabilities, bags[0].slide_id)


def group_bags(bags: Iterable[MilBag]) -> Dict[str, List[MilBag]]:
    out: Dict[str, List[MilBag]] = {}
    for bag in bags:
        out.setdefault(bag.slide_id, []).append(bag)
    return out


def predict_slides(classifier: MilClassifier, bags: Sequence[MilBag]) -> List[SlidePrediction]:
    return [predict_slide(classifier, slide_bags) for slide_bags in group_bags(bags).values()]


def slide_truth(bags: Sequence[MilBag]) -> Dict[str, int]:
    truth: Dict[str, int] = {}
    for bag in bags:
        if truth.setdefault(bag.slide_id, bag.label) != bag.label:
            raise DataError(f"slide {bag.slide_id!r} has bags with different labels")
    return truth


def classifier_to_payload(classifier: MilClassifier, meta: Optional[Dict[str, object]] = None) -> Dict[str, object]:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "mil",
        "bag_dim": classifier.bag_dim,
        "n_classes": classifier.n_classes,
        "layers": [layer.to_payload() for layer in classifier.layers()],
        "meta": dict(meta or {}),
    }


def classifier_from_payload(payload: Dict[str, object]) -> MilClassifier:
    if payload.get("format_version") != FORMAT_VERSION or payload.get("kind") != "mil":
        raise DataError(
            f"not a bag classifier checkpoint v{FORMAT_VERSION} (kind={payload.get('kind')!r}, "
            f"format_version={payload.get('format_version')!r})"
        )
    return MilClassifier.from_layers([DenseLayer.from_payload(layer) for layer in payload["layers"]])


__all__ = [
    "MilBag",
    "MilClassifier",
    "SlidePrediction",
    "make_bags",
    "bags_for_set",
    "stack_bags",
    "init_classifier",
    "classifier_forward",
    "classifier_backward",
    "train_mil",
    "vote",
    "predict_slide",
    "predict_slides",
    "group_bags",
    "slide_truth",
    "classifier_to_payload",
    "classifier_from_payload",
]
