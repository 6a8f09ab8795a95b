"""Tests for :mod:`src.losses`."""
from __future__ import annotations

import math
from typing import Callable, List, Sequence

import numpy as np
import pytest

from src.cluster import PrototypeSet
from src.config import LossConfig
from src.errors import AssignmentError, ConfigError, NumericError
from src.losses import (
    Batch,
    cosine_prototype_loss,
    cross_entropy,
    hausdorff,
    inter_loss,
    intra_loss,
    manifold_loss,
    total_loss,
)
from src.nn import softmax, softmax_backward

H = 1e-5
GAP = 1e-3


def _protos(rows: Sequence[Sequence[float]], class_id: int) -> PrototypeSet:
    points = np.asarray(rows, dtype=float)
    return PrototypeSet(prototypes=points, class_id=class_id, member_counts=np.ones(points.shape[0], dtype=np.int64))


def _numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up = x.copy()
        down = x.copy()
        up[idx] += H
        down[idx] -= H
        grad[idx] = (fn(up) - fn(down)) / (2.0 * H)
    return grad


def _assert_grad_close(analytic: np.ndarray, numeric: np.ndarray) -> None:
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def _brute_hausdorff(y: np.ndarray, z: np.ndarray) -> float:
    forward = max(min(float(np.linalg.norm(a - b)) for b in z) for a in y)
    backward = max(min(float(np.linalg.norm(a - b)) for a in y) for b in z)
    return max(forward, backward)


def _top_gap(values: np.ndarray) -> float:
    if values.size < 2:
        return math.inf
    ordered = np.sort(values)
    return float(ordered[-1] - ordered[-2])


def _low_gap(values: np.ndarray) -> float:
    if values.size < 2:
        return math.inf
    ordered = np.sort(values)
    return float(ordered[1] - ordered[0])


def _witness_is_stable(y: np.ndarray, z: np.ndarray) -> bool:
    """True when a perturbation of size H cannot change the Hausdorff witness."""

    dist = np.linalg.norm(y[:, None, :] - z[None, :, :], axis=2)
    to_z = dist.min(axis=1)
    to_y = dist.min(axis=0)
    y_far = int(np.argmax(to_z))
    z_far = int(np.argmax(to_y))
    return (
        _top_gap(to_z) > GAP
        and _top_gap(to_y) > GAP
        and _low_gap(dist[y_far]) > GAP
        and _low_gap(dist[:, z_far]) > GAP
        and abs(to_z[y_far] - to_y[z_far]) > GAP
        and all(_low_gap(row) > GAP for row in dist)
        and all(_low_gap(col) > GAP for col in dist.T)
    )


def _random_problem(rng: np.random.Generator, n_classes: int, dim: int, rows: int):
    labels = np.arange(rows) % n_classes
    rng.shuffle(labels)
    sets: List[PrototypeSet] = []
    for label in range(n_classes):
        count = int(rng.integers(1, 4))
        sets.append(_protos(rng.normal(size=(count, dim)) + 2.0 * label, label))
    subs = np.array([int(rng.integers(0, sets[label].count)) for label in labels])
    embeddings = rng.normal(size=(rows, dim)) + labels[:, None]
    return embeddings, labels, subs, sets


def test_intra_example() -> None:
    batch = Batch(np.array([[1.0, 0.0]]), np.array([0]), np.array([0]))
    result = intra_loss(batch, [_protos([[0.0, 0.0]], 0)])
    assert result.value == pytest.approx(1.0)
    assert result.grad_embeddings.tolist() == [[2.0, 0.0]]


def test_intra_rejects_missing_prototype() -> None:
    batch = Batch(np.zeros((1, 2)), np.array([0]), np.array([5]))
    with pytest.raises(AssignmentError):
        intra_loss(batch, [_protos([[0.0, 0.0], [1.0, 1.0]], 0)])
    with pytest.raises(IndexError):
        intra_loss(batch, [_protos([[0.0, 0.0], [1.0, 1.0]], 0)])


def test_hausdorff_matches_brute_force() -> None:
    rng = np.random.default_rng(0)
    for _ in range(1000):
        y = rng.normal(size=(int(rng.integers(1, 9)), 3))
        z = rng.normal(size=(int(rng.integers(1, 9)), 3))
        value, (yi, zi) = hausdorff(y, z)
        assert value == pytest.approx(_brute_hausdorff(y, z), abs=1e-12)
        assert float(np.linalg.norm(y[yi] - z[zi])) == pytest.approx(value, abs=1e-12)


def test_hausdorff_properties() -> None:
    rng = np.random.default_rng(1)
    for _ in range(200):
        a, b, c = (rng.normal(size=(int(rng.integers(1, 6)), 2)) for _ in range(3))
        shift = rng.normal(size=2) * 3.0
        d_ab = hausdorff(a, b)[0]
        assert d_ab == pytest.approx(hausdorff(b, a)[0], abs=1e-12)
        assert hausdorff(a + shift, b + shift)[0] == pytest.approx(d_ab, abs=1e-12)
        assert d_ab <= hausdorff(a, c)[0] + hausdorff(c, b)[0] + 1e-12
        assert hausdorff(a, a)[0] == 0.0


def test_hausdorff_forward_direction_wins_ties() -> None:
    value, witness = hausdorff(np.array([[0.0], [2.0]]), np.array([[0.0], [-2.0]]))
    assert value == 2.0
    assert witness == (1, 0)


def test_inter_examples() -> None:
    batch = Batch(np.array([[0.0, 0.0]]), np.array([0]), np.array([0]))
    sets = [_protos([[0.0, 0.0]], 0), _protos([[1.0, 0.0]], 1)]
    assert inter_loss(batch, sets, LossConfig(margin=1.0)).value == pytest.approx(0.0)
    result = inter_loss(batch, sets, LossConfig(margin=2.0))
    assert result.value == pytest.approx(1.0)
    np.testing.assert_allclose(result.grad_embeddings, [[1.0, 0.0]])


def test_inter_clamp_only_changes_negative_terms() -> None:
    batch = Batch(np.array([[0.0, 0.0]]), np.array([0]), np.array([0]))
    sets = [_protos([[0.0, 0.0]], 0), _protos([[3.0, 0.0]], 1)]
    assert inter_loss(batch, sets, LossConfig(margin=1.0)).value == 0.0
    unclamped = inter_loss(batch, sets, LossConfig(margin=1.0, inter_clamp=False))
    assert unclamped.value == pytest.approx(-2.0)


def test_inter_needs_two_classes() -> None:
    batch = Batch(np.zeros((1, 2)), np.array([0]), np.array([0]))
    with pytest.raises(ConfigError):
        inter_loss(batch, [_protos([[0.0, 0.0]], 0)], LossConfig())


def test_intra_gradient_matches_finite_differences() -> None:
    rng = np.random.default_rng(2)
    for _ in range(50):
        emb, labels, subs, sets = _random_problem(rng, 3, 4, 7)
        analytic = intra_loss(Batch(emb, labels, subs), sets).grad_embeddings
        numeric = _numeric_grad(lambda x: intra_loss(Batch(x, labels, subs), sets).value, emb)
        _assert_grad_close(analytic, numeric)


def test_inter_gradient_matches_finite_differences() -> None:
    rng = np.random.default_rng(3)
    cfg = LossConfig(margin=1.5, inter_clamp=False)
    accepted = 0
    while accepted < 50:
        emb, labels, subs, sets = _random_problem(rng, 3, 3, 6)
        stable = all(
            _witness_is_stable(emb[labels == a], sets[b].prototypes)
            for a in range(3)
            for b in range(3)
            if a != b
        )
        if not stable:
            continue
        accepted += 1
        analytic = inter_loss(Batch(emb, labels, subs), sets, cfg).grad_embeddings
        numeric = _numeric_grad(lambda x: inter_loss(Batch(x, labels, subs), sets, cfg).value, emb)
        _assert_grad_close(analytic, numeric)


def test_manifold_loss_is_intra_plus_inter() -> None:
    rng = np.random.default_rng(4)
    cfg = LossConfig(margin=2.0)
    emb, labels, subs, sets = _random_problem(rng, 2, 3, 8)
    batch = Batch(emb, labels, subs)
    combined = manifold_loss(batch, sets, cfg)
    intra = intra_loss(batch, sets)
    inter = inter_loss(batch, sets, cfg)
    assert combined.value == pytest.approx(intra.value + inter.value, abs=1e-12)
    np.testing.assert_allclose(combined.grad_embeddings, intra.grad_embeddings + inter.grad_embeddings, atol=1e-12)
    assert set(combined.parts) == {"intra", "inter"}


def test_cross_entropy_examples() -> None:
    half = cross_entropy(np.array([[0.5, 0.5]]), np.array([1]))
    assert half.value == pytest.approx(math.log(2.0))
    perfect = cross_entropy(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([1, 0]))
    assert perfect.value <= 1e-10
    three = cross_entropy(np.array([[0.2, 0.3, 0.5]]), np.array([2]))
    assert three.value == pytest.approx(-math.log(0.5))


def test_cross_entropy_rejects_bad_labels_and_values() -> None:
    with pytest.raises(AssignmentError):
        cross_entropy(np.array([[0.5, 0.5]]), np.array([2]))
    with pytest.raises(NumericError):
        cross_entropy(np.array([[np.nan, 0.5]]), np.array([0]))


@pytest.mark.parametrize("n_classes", [2, 4])
def test_cross_entropy_gradient_matches_finite_differences(n_classes: int) -> None:
    rng = np.random.default_rng(5 + n_classes)
    for _ in range(50):
        probs = rng.dirichlet(np.ones(n_classes), size=6) * 0.9 + 0.1 / n_classes
        labels = rng.integers(0, n_classes, size=6)
        analytic = cross_entropy(probs, labels).grad_probabilities
        numeric = _numeric_grad(lambda p: cross_entropy(p, labels).value, probs)
        _assert_grad_close(analytic, numeric)


def test_binary_cross_entropy_stays_exact_on_confident_rows() -> None:
    # row 0 puts ~1e-11 on its true class; 1 - p1 computed by subtraction loses five digits there
    logits = np.array([[0.0, 25.0], [1.5, -0.5], [-2.0, 3.0]])
    labels = np.array([0, 0, 1])
    probs = softmax(logits)
    loss = cross_entropy(probs, labels)
    expected = np.mean([25.0 + np.log1p(np.exp(-25.0)), np.log1p(np.exp(-2.0)), np.log1p(np.exp(-5.0))])
    assert loss.value == pytest.approx(expected, rel=1e-12)
    grad_logits = softmax_backward(probs, loss.grad_probabilities)
    np.testing.assert_allclose(grad_logits, (probs - np.eye(2)[labels]) / 3, rtol=1e-9, atol=1e-15)
    numeric = _numeric_grad(lambda z: cross_entropy(softmax(z), labels).value, logits)
    _assert_grad_close(grad_logits, numeric)


def test_cosine_examples() -> None:
    cfg = LossConfig(temperature=1.0)
    batch = Batch(np.array([[1.0, 0.0]]), np.array([0]), np.array([0]))
    sets = [_protos([[1.0, 0.0]], 0), _protos([[0.0, 1.0]], 1)]
    assert cosine_prototype_loss(batch, sets, cfg).value == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-4)
    lone = cosine_prototype_loss(batch, [_protos([[2.0, 0.0]], 0)], cfg)
    assert lone.value == pytest.approx(0.0, abs=1e-12)


def test_cosine_rejects_zero_norm() -> None:
    batch = Batch(np.zeros((1, 2)), np.array([0]), np.array([0]))
    with pytest.raises(NumericError):
        cosine_prototype_loss(batch, [_protos([[1.0, 0.0]], 0)], LossConfig())


def test_cosine_gradient_matches_finite_differences() -> None:
    rng = np.random.default_rng(6)
    cfg = LossConfig(temperature=0.5)
    for _ in range(50):
        emb, labels, subs, sets = _random_problem(rng, 3, 4, 6)
        analytic = cosine_prototype_loss(Batch(emb, labels, subs), sets, cfg).grad_embeddings
        numeric = _numeric_grad(lambda x: cosine_prototype_loss(Batch(x, labels, subs), sets, cfg).value, emb)
        _assert_grad_close(analytic, numeric)


def test_total_loss_adds_both_paths() -> None:
    rng = np.random.default_rng(7)
    cfg = LossConfig(margin=2.0)
    emb, labels, subs, sets = _random_problem(rng, 2, 3, 6)
    probs = rng.dirichlet(np.ones(2), size=6)
    batch = Batch(emb, labels, subs)
    total = total_loss(batch, sets, probs, labels, cfg)
    expected = manifold_loss(batch, sets, cfg).value + cross_entropy(probs, labels).value
    assert total.value == pytest.approx(expected, abs=1e-12)
    assert set(total.parts) == {"intra", "inter", "ce"}
    cosine = total_loss(batch, sets, probs, labels, cfg, objective="cosine")
    assert set(cosine.parts) == {"cosine", "ce"}
    with pytest.raises(ConfigError):
        total_loss(batch, sets, probs, labels, cfg, objective="baseline")
