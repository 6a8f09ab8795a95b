"""Dense layers, activations and plain SGD shared by the encoder and the bag classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DataError, NumericError


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped ``(fan_in, fan_out)``."""

    name: str
    weight: np.ndarray
    bias: np.ndarray

    @property
    def fan_in(self) -> int:
        return int(self.weight.shape[0])

    @property
    def fan_out(self) -> int:
        return int(self.weight.shape[1])

    @property
    def parameter_count(self) -> int:
        return int(self.weight.size + self.bias.size)

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        return inputs @ self.weight + self.bias

    def to_payload(self) -> Dict[str, object]:
        return {"name": self.name, "weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_payload(cls, payload: Dict[str, object]) -> "DenseLayer":
        weight = np.asarray(payload["weight"], dtype=float)
        bias = np.asarray(payload["bias"], dtype=float).reshape(-1)
        if weight.ndim != 2 or bias.size != weight.shape[1]:
            raise DataError(f"layer {payload.get('name')!r}: weight {weight.shape} and bias {bias.shape} disagree")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise NumericError(f"layer {payload.get('name')!r} has non-finite parameters")
        return cls(name=str(payload["name"]), weight=weight, bias=bias)


@dataclass(frozen=True, eq=False)
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros_like(cls, layer: DenseLayer) -> "LayerGrad":
        return cls(np.zeros_like(layer.weight), np.zeros_like(layer.bias))


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> DenseLayer:
    """Uniform on ``[-sqrt(6/fan_in), sqrt(6/fan_in)]`` (std ``sqrt(2/fan_in)``), zero bias."""

    limit = math.sqrt(6.0 / fan_in)
    return DenseLayer(
        name=name,
        weight=rng.uniform(-limit, limit, size=(fan_in, fan_out)),
        bias=np.zeros(fan_out),
    )


def relu(values: np.ndarray) -> np.ndarray:
    return np.maximum(values, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_backward(probabilities: np.ndarray, grad_probabilities: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. softmax outputs."""

    inner = np.sum(grad_probabilities * probabilities, axis=1, keepdims=True)
    return probabilities * (grad_probabilities - inner)


def check_finite(values: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"NaN/Inf in {where} activations")
    return values


def dense_backward(layer: DenseLayer, inputs: np.ndarray, grad_out: np.ndarray) -> Tuple[LayerGrad, np.ndarray]:
    """Parameter gradient and the gradient w.r.t. the layer's inputs.

    Upstream losses already average over the batch, so rows are summed here.
    """

    return LayerGrad(inputs.T @ grad_out, grad_out.sum(axis=0)), grad_out @ layer.weight.T


@dataclass(frozen=True, eq=False)
class TrunkCache:
    inputs: Tuple[np.ndarray, ...]
    pre_activations: Tuple[np.ndarray, ...]
    output: np.ndarray


def trunk_forward(layers: Sequence[DenseLayer], inputs: np.ndarray) -> TrunkCache:
    """ReLU stack; keeps what ``trunk_backward`` needs."""

    seen: List[np.ndarray] = []
    pre: List[np.ndarray] = []
    current = inputs
    for layer in layers:
        seen.append(current)
        z = check_finite(layer.forward(current), layer.name)
        pre.append(z)
        current = relu(z)
    return TrunkCache(inputs=tuple(seen), pre_activations=tuple(pre), output=current)


def trunk_backward(layers: Sequence[DenseLayer], cache: TrunkCache, grad_out: np.ndarray) -> List[LayerGrad]:
    grads: List[LayerGrad] = []
    grad = grad_out
    for layer, inputs, z in zip(reversed(layers), reversed(cache.inputs), reversed(cache.pre_activations)):
        grad = grad * (z > 0.0)
        layer_grad, grad = dense_backward(layer, inputs, grad)
        grads.append(layer_grad)
    grads.reverse()
    return grads


def decayed_rate(lr: float, decay: float, step_index: int) -> float:
    """Time-based decay ``lr / (1 + decay * t)``."""

    return lr / (1.0 + decay * step_index)


def sgd_update(
    layers: Sequence[DenseLayer],
    grads: Sequence[LayerGrad],
    lr: float,
    decay: float,
    step_index: int,
) -> Tuple[DenseLayer, ...]:
    if len(layers) != len(grads):
        raise DataError(f"{len(grads)} gradients for {len(layers)} layers")
    for layer, grad in zip(layers, grads):
        if grad.weight.shape != layer.weight.shape or grad.bias.shape != layer.bias.shape:
            raise DataError(f"gradient shape mismatch on layer {layer.name}")
        if not (np.all(np.isfinite(grad.weight)) and np.all(np.isfinite(grad.bias))):
            raise NumericError(f"non-finite gradient on layer {layer.name} at step {step_index}")
    rate = decayed_rate(lr, decay, step_index)
    return tuple(
        DenseLayer(name=layer.name, weight=layer.weight - rate * grad.weight, bias=layer.bias - rate * grad.bias)
        for layer, grad in zip(layers, grads)
    )


def stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle within each class, then interleave classes in proportion to their size.

    Any contiguous window of the result mixes classes as evenly as their
    counts allow, so mini-batches cut from it carry cross-class content.
    """

    labels = np.asarray(labels, dtype=np.int64)
    rows: List[int] = []
    keys: List[Tuple[float, int]] = []
    for label in sorted(set(labels.tolist())):
        members = rng.permutation(np.flatnonzero(labels == label))
        for rank, row in enumerate(members):
            rows.append(int(row))
            keys.append(((rank + 0.5) / members.size, label))
    order = sorted(range(len(rows)), key=lambda i: keys[i])
    return np.asarray([rows[i] for i in order], dtype=np.int64)


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = stratified_order(labels, rng)
    return [order[start:start + batch_size] for start in range(0, order.size, batch_size)]


__all__ = [
    "DenseLayer",
    "LayerGrad",
    "TrunkCache",
    "he_uniform",
    "relu",
    "softmax",
    "softmax_backward",
    "check_finite",
    "dense_backward",
    "trunk_forward",
    "trunk_backward",
    "decayed_rate",
    "sgd_update",
    "stratified_order",
    "stratified_batches",
]
