"""Two-headed feed-forward encoder and the stage-1 training loop.

The trunk is a ReLU stack; the embedding head and the softmax head both read
the trunk output, so their gradients meet at the trunk junction. Prototypes
are refreshed on full-training-set embeddings every ``refresh_every`` epochs
(epoch 0 included) and stay frozen in between.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .cluster import ManifoldState, refresh_manifold
from .config import TrainConfig, split_dims
from .dataio import LabeledFeatureSet
from .errors import ConfigError, DataError
from .losses import Batch, inter_loss, intra_loss, total_loss
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
HISTORY_COLUMNS = ["epoch", "l_intra", "l_inter", "l_ce", "l_total", "train_acc"]


@dataclass(frozen=True, eq=False)
class EncoderModel:
    trunk: Tuple[DenseLayer, ...]
    embed_head: DenseLayer
    softmax_head: DenseLayer

    @property
    def layer_dims(self) -> List[int]:
        return [self.trunk[0].fan_in] + [layer.fan_out for layer in self.trunk]

    @property
    def input_dim(self) -> int:
        return self.trunk[0].fan_in

    @property
    def embed_dim(self) -> int:
        return self.embed_head.fan_out

    @property
    def n_classes(self) -> int:
        return self.softmax_head.fan_out

    def layers(self) -> List[DenseLayer]:
        return [*self.trunk, self.embed_head, self.softmax_head]

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers())

    @classmethod
    def from_layers(cls, layers: Sequence[DenseLayer]) -> "EncoderModel":
        layers = list(layers)
        if len(layers) < 3:
            raise ConfigError(f"an encoder needs a trunk layer and two heads (got {len(layers)} layers)")
        model = cls(trunk=tuple(layers[:-2]), embed_head=layers[-2], softmax_head=layers[-1])
        model._check_composition()
        return model

    def _check_composition(self) -> None:
        width = self.trunk[0].fan_in
        for layer in self.trunk:
            if layer.fan_in != width:
                raise ConfigError(f"layer {layer.name} expects {layer.fan_in} inputs but receives {width}")
            width = layer.fan_out
        for head in (self.embed_head, self.softmax_head):
            if head.fan_in != width:
                raise ConfigError(f"head {head.name} expects {head.fan_in} inputs but the trunk emits {width}")


@dataclass(frozen=True, eq=False)
class ForwardCache:
    trunk: TrunkCache
    probabilities: np.ndarray


@dataclass(frozen=True, eq=False)
class EncoderGrads:
    trunk: Tuple[LayerGrad, ...]
    embed_head: LayerGrad
    softmax_head: LayerGrad

    def as_list(self) -> List[LayerGrad]:
        return [*self.trunk, self.embed_head, self.softmax_head]


@dataclass
class EpochRecord:
    epoch: int
    l_intra: float
    l_inter: float
    l_ce: float
    l_total: float
    train_acc: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(record) for record in self.records], columns=HISTORY_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(p, index=False)


def init_encoder(layer_dims: Sequence[int], seed: int, embed_dim: int, n_classes: int) -> EncoderModel:
    """He-uniform weights and zero biases drawn from ``default_rng(seed)``."""

    input_dim, hidden = split_dims(tuple(layer_dims))
    if input_dim < 1 or any(dim < 1 for dim in hidden) or embed_dim < 1 or n_classes < 1:
        raise ConfigError(f"all dimensions must be positive (layer_dims={list(layer_dims)}, D'={embed_dim}, C={n_classes})")
    rng = np.random.default_rng(seed)
    trunk = []
    width = input_dim
    for index, dim in enumerate(hidden):
        trunk.append(he_uniform(rng, width, dim, f"trunk.{index}"))
        width = dim
    return EncoderModel(
        trunk=tuple(trunk),
        embed_head=he_uniform(rng, width, embed_dim, "embed"),
        softmax_head=he_uniform(rng, width, n_classes, "softmax"),
    )


def forward(model: EncoderModel, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DataError(f"encoder expects {model.input_dim} input columns (got shape {x.shape})")
    trunk = trunk_forward(model.trunk, x)
    embeddings = check_finite(model.embed_head.forward(trunk.output), model.embed_head.name)
    logits = check_finite(model.softmax_head.forward(trunk.output), model.softmax_head.name)
    probabilities = softmax(logits)
    return embeddings, probabilities, ForwardCache(trunk=trunk, probabilities=probabilities)


def backward(
    model: EncoderModel,
    cache: ForwardCache,
    grad_embeddings: Optional[np.ndarray],
    grad_probabilities: Optional[np.ndarray],
) -> EncoderGrads:
    rows = cache.trunk.output.shape[0]
    if grad_embeddings is None:
        grad_embeddings = np.zeros((rows, model.embed_dim))
    if grad_probabilities is None:
        grad_probabilities = np.zeros((rows, model.n_classes))
    if grad_embeddings.shape != (rows, model.embed_dim):
        raise DataError(f"grad_embeddings shape {grad_embeddings.shape} != {(rows, model.embed_dim)}")
    if grad_probabilities.shape != (rows, model.n_classes):
        raise DataError(f"grad_probabilities shape {grad_probabilities.shape} != {(rows, model.n_classes)}")
    hidden = cache.trunk.output
    embed_grad, from_embed = dense_backward(model.embed_head, hidden, grad_embeddings)
    grad_logits = softmax_backward(cache.probabilities, grad_probabilities)
    softmax_grad, from_softmax = dense_backward(model.softmax_head, hidden, grad_logits)
    trunk_grads = trunk_backward(model.trunk, cache.trunk, from_embed + from_softmax)
    return EncoderGrads(trunk=tuple(trunk_grads), embed_head=embed_grad, softmax_head=softmax_grad)


def sgd_step(model: EncoderModel, grads: EncoderGrads, lr: float, decay: float, step_index: int) -> EncoderModel:
    return EncoderModel.from_layers(sgd_update(model.layers(), grads.as_list(), lr, decay, step_index))


def extract_embeddings(model: EncoderModel, data: Union[LabeledFeatureSet, np.ndarray]) -> np.ndarray:
    features = data.features if isinstance(data, LabeledFeatureSet) else data
    embeddings, _, _ = forward(model, features)
    return embeddings


def _preflight(train_set: LabeledFeatureSet, cfg: TrainConfig) -> None:
    cfg.validate()
    classes = train_set.classes
    if len(classes) < 2:
        raise ConfigError(f"training needs at least two classes (got {classes})")
    if classes != list(range(len(classes))):
        raise ConfigError(f"class labels must be contiguous from 0 (got {classes})")
    for label in classes:
        size = int(train_set.class_indices(label).size)
        if size < cfg.subclasses:
            raise ConfigError(f"class {label} has {size} samples, fewer than n={cfg.subclasses}")
        if cfg.objective == "geodesic" and not cfg.global_graph and size <= cfg.k:
            raise ConfigError(f"class {label} has {size} samples; k={cfg.k} needs more than k per class")
    if cfg.objective == "geodesic" and cfg.global_graph and train_set.size <= cfg.k:
        raise ConfigError(f"k={cfg.k} needs more than {cfg.k} training samples (got {train_set.size})")


def _refresh(model: EncoderModel, train_set: LabeledFeatureSet, cfg: TrainConfig, epoch: int, log: RunLog) -> ManifoldState:
    state = refresh_manifold(
        train_set,
        extract_embeddings(model, train_set),
        k=cfg.k,
        n=cfg.n,
        linkage=cfg.linkage,
        clustering="kmeans" if cfg.objective == "cosine" else "agglomerative",
        prototype_mode=cfg.prototype_mode,
        global_graph=cfg.global_graph,
        n_jobs=cfg.n_jobs,
        seed=cfg.seed + epoch,
    )
    log.event("refresh", epoch=epoch, **state.summary())
    return state


def train_encoder(
    train_set: LabeledFeatureSet,
    cfg: TrainConfig,
    log: RunLog = NULL_LOG,
) -> Tuple[EncoderModel, TrainHistory]:
    """Stage-1 training; deterministic for a fixed seed.

    With ``objective="baseline"`` the freshly initialised encoder is returned
    untouched, which gives the untrained-feature reference point.
    """

    _preflight(train_set, cfg)
    model = init_encoder([train_set.dim, *cfg.hidden_dims], cfg.seed, cfg.embed_dim, train_set.num_classes)
    history = TrainHistory()
    if cfg.objective == "baseline":
        log.event("baseline", parameters=model.parameter_count)
        return model, history
    batch_rng = np.random.default_rng([cfg.seed, 1])
    labels = train_set.labels
    state: Optional[ManifoldState] = None
    step = 0
    for epoch in range(cfg.epochs):
        if state is None or epoch % cfg.refresh_every == 0:
            state = _refresh(model, train_set, cfg, epoch, log)
        prototypes = state.prototypes_by_class()
        sums: Dict[str, float] = {"l_intra": 0.0, "l_inter": 0.0, "l_ce": 0.0, "l_total": 0.0}
        for rows in stratified_batches(labels, cfg.batch_size, batch_rng):
            embeddings, probabilities, cache = forward(model, train_set.features[rows])
            batch = Batch(embeddings, labels[rows], state.assignments[rows])
            loss = total_loss(batch, prototypes, probabilities, labels[rows], cfg.loss, cfg.objective)
            if cfg.objective == "geodesic":
                intra, inter = loss.parts["intra"], loss.parts["inter"]
            else:
                intra = intra_loss(batch, prototypes).value
                inter = inter_loss(batch, prototypes, cfg.loss).value
            weight = float(rows.size)
            sums["l_intra"] += weight * intra
            sums["l_inter"] += weight * inter
            sums["l_ce"] += weight * loss.parts["ce"]
            sums["l_total"] += weight * loss.value
            grads = backward(model, cache, loss.grad_embeddings, loss.grad_probabilities)
            model = sgd_step(model, grads, cfg.lr, cfg.lr_decay, step)
            step += 1
        _, probabilities, _ = forward(model, train_set.features)
        accuracy = float(np.mean(np.argmax(probabilities, axis=1) == labels))
        record = EpochRecord(epoch=epoch + 1, train_acc=accuracy, **{key: value / train_set.size for key, value in sums.items()})
        history.records.append(record)
        log.event("epoch", **asdict(record))
    return model, history


def model_to_payload(model: EncoderModel, meta: Optional[Dict[str, object]] = None) -> Dict[str, object]:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "encoder",
        "layer_dims": model.layer_dims,
        "embed_dim": model.embed_dim,
        "n_classes": model.n_classes,
        "layers": [layer.to_payload() for layer in model.layers()],
        "meta": dict(meta or {}),
    }


def model_from_payload(payload: Dict[str, object]) -> EncoderModel:
    if payload.get("format_version") != FORMAT_VERSION or payload.get("kind") != "encoder":
        raise DataError(
            f"not an encoder checkpoint v{FORMAT_VERSION} (kind={payload.get('kind')!r}, "
            f"format_version={payload.get('format_version')!r})"
        )
    model = EncoderModel.from_layers([DenseLayer.from_payload(layer) for layer in payload["layers"]])
    if model.layer_dims != list(payload["layer_dims"]):
        raise DataError(f"checkpoint layer_dims {payload['layer_dims']} disagree with weights {model.layer_dims}")
    return model


__all__ = [
    "EncoderModel",
    "EncoderGrads",
    "ForwardCache",
    "EpochRecord",
    "TrainHistory",
    "HISTORY_COLUMNS",
    "init_encoder",
    "forward",
    "backward",
    "sgd_step",
    "extract_embeddings",
    "train_encoder",
    "model_to_payload",
    "model_from_payload",
]
