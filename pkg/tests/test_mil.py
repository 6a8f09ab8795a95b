"""Tests for :mod:`src.mil`."""
from __future__ import annotations

import json

import numpy as np
import pytest

from src.config import MilConfig
from src.dataio import LabeledFeatureSet
from src.errors import ConfigError, DataError
from src.losses import cross_entropy
from src.mil import (
    MilBag,
    MilClassifier,
    bags_for_set,
    classifier_backward,
    classifier_forward,
    classifier_from_payload,
    classifier_to_payload,
    init_classifier,
    make_bags,
    predict_slide,
    predict_slides,
    slide_truth,
    stack_bags,
    train_mil,
    vote,
)
from src.nn import DenseLayer

H = 1e-5


def _toy_bags(rng: np.random.Generator, per_class: int = 20, dim: int = 6) -> list:
    bags = []
    for label, centre in ((0, -1.0), (1, 1.0)):
        for index in range(per_class):
            slide = f"c{label}-s{index % 4}"
            bags.append(MilBag(rng.normal(centre, 0.3, size=dim), slide, label))
    return bags


def test_default_bag_shapes() -> None:
    embeddings = np.random.default_rng(0).normal(size=(150, 4))
    bags = make_bags(embeddings, "slide-a", 1, MilConfig())
    assert len(bags) == 50
    assert all(bag.bag_vector.shape == (400,) for bag in bags)
    assert all(bag.slide_id == "slide-a" and bag.label == 1 for bag in bags)


def test_single_patch_slide_repeats_its_row() -> None:
    row = np.array([[1.0, 2.0]])
    bags = make_bags(row, "s", 0, MilConfig(bags_per_slide=3, patches_per_bag=4))
    for bag in bags:
        assert bag.bag_vector.tolist() == [1.0, 2.0] * 4


def test_sampling_without_replacement_when_possible() -> None:
    embeddings = np.arange(12, dtype=float)[:, None]
    bags = make_bags(embeddings, "s", 0, MilConfig(bags_per_slide=20, patches_per_bag=12))
    for bag in bags:
        assert sorted(bag.bag_vector.tolist()) == list(range(12))


def test_mean_pooling_averages_the_sample() -> None:
    embeddings = np.full((5, 3), 2.0)
    (bag,) = make_bags(embeddings, "s", 0, MilConfig(bags_per_slide=1, patches_per_bag=3, pooling="mean"))
    assert bag.bag_vector.tolist() == [2.0, 2.0, 2.0]


def test_bags_depend_only_on_seed_and_slide() -> None:
    embeddings = np.random.default_rng(1).normal(size=(30, 2))
    cfg = MilConfig(bags_per_slide=5, patches_per_bag=10, seed=3)
    a = make_bags(embeddings, "slide-x", 0, cfg)
    b = make_bags(embeddings, "slide-x", 0, cfg)
    c = make_bags(embeddings, "slide-y", 0, cfg)
    d = make_bags(embeddings, "slide-x", 0, cfg, seed=4)
    assert all(np.array_equal(x.bag_vector, y.bag_vector) for x, y in zip(a, b))
    assert not all(np.array_equal(x.bag_vector, y.bag_vector) for x, y in zip(a, c))
    assert not all(np.array_equal(x.bag_vector, y.bag_vector) for x, y in zip(a, d))


def test_empty_slide_is_rejected() -> None:
    with pytest.raises(DataError):
        make_bags(np.zeros((0, 3)), "s", 0, MilConfig())
    with pytest.raises(DataError):
        MilBag(np.array([np.nan]), "s", 0)


def test_bags_for_set_covers_every_slide() -> None:
    embedded = LabeledFeatureSet(
        features=np.random.default_rng(2).normal(size=(12, 2)),
        labels=np.array([0] * 6 + [1] * 6),
        group_ids=tuple(["a"] * 3 + ["b"] * 3 + ["c"] * 6),
    )
    bags = bags_for_set(embedded, MilConfig(bags_per_slide=4, patches_per_bag=2))
    assert len(bags) == 12
    assert slide_truth(bags) == {"a": 0, "b": 0, "c": 1}


def test_stack_bags_checks_widths() -> None:
    with pytest.raises(DataError):
        stack_bags([MilBag(np.zeros(2), "a", 0), MilBag(np.zeros(3), "b", 1)])
    with pytest.raises(DataError):
        stack_bags([])


def test_vote_majority_fraction() -> None:
    probs = np.array([[0.2, 0.8]] * 30 + [[0.9, 0.1]] * 20)
    prediction = vote(probs, "s")
    assert prediction.final_label == 1
    assert prediction.vote_fraction == pytest.approx(0.6)
    assert len(prediction.bag_predictions) == 50


def test_vote_ties_use_mean_probability_then_lower_class() -> None:
    favour_zero = np.array([[0.9, 0.1]] * 25 + [[0.45, 0.55]] * 25)
    assert vote(favour_zero, "s").final_label == 0
    favour_one = np.array([[0.55, 0.45]] * 25 + [[0.1, 0.9]] * 25)
    assert vote(favour_one, "s").final_label == 1
    even = np.array([[0.75, 0.25]] * 25 + [[0.25, 0.75]] * 25)
    prediction = vote(even, "s")
    assert prediction.final_label == 0
    assert prediction.vote_fraction == 0.5


def test_vote_ignores_bag_order() -> None:
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(3), size=21)
    shuffled = probs[rng.permutation(21)]
    assert vote(probs, "s").final_label == vote(shuffled, "s").final_label
    with pytest.raises(DataError):
        vote(np.zeros((0, 2)), "s")


def test_classifier_gradient_matches_finite_differences() -> None:
    rng = np.random.default_rng(4)
    accepted = 0
    while accepted < 50:
        classifier = init_classifier(5, 4, 3, seed=int(rng.integers(0, 2**31)))
        inputs = rng.normal(size=(6, 5))
        labels = rng.integers(0, 3, size=6)
        probabilities, cache = classifier_forward(classifier, inputs)
        if any(np.min(np.abs(z)) < 1e-3 for z in cache.pre_activations):
            continue
        accepted += 1
        loss = cross_entropy(probabilities, labels)
        analytic = classifier_backward(classifier, cache, probabilities, loss.grad_probabilities)
        layers = classifier.layers()
        for index, layer in enumerate(layers):
            numeric = np.zeros_like(layer.weight)
            for idx in np.ndindex(layer.weight.shape):
                values = []
                for delta in (H, -H):
                    weight = layer.weight.copy()
                    weight[idx] += delta
                    trial = list(layers)
                    trial[index] = DenseLayer(layer.name, weight, layer.bias)
                    probs, _ = classifier_forward(MilClassifier.from_layers(trial), inputs)
                    values.append(cross_entropy(probs, labels).value)
                numeric[idx] = (values[0] - values[1]) / (2.0 * H)
            np.testing.assert_allclose(analytic[index].weight, numeric, rtol=1e-4, atol=1e-6)


def test_train_mil_fits_separable_bags() -> None:
    bags = _toy_bags(np.random.default_rng(5))
    cfg = MilConfig(classifier_hidden=16, lr=0.05, decay=0.0, epochs=100, batch_size=4, seed=1)
    classifier = train_mil(bags, cfg)
    inputs, labels = stack_bags(bags)
    probabilities, _ = classifier_forward(classifier, inputs)
    assert np.mean(np.argmax(probabilities, axis=1) == labels) == 1.0
    predictions = predict_slides(classifier, bags)
    assert [p.final_label for p in predictions] == [0, 0, 0, 0, 1, 1, 1, 1]


def test_train_mil_is_seeded_and_zero_epochs_is_init() -> None:
    bags = _toy_bags(np.random.default_rng(6), per_class=8)
    cfg = MilConfig(classifier_hidden=8, epochs=3, batch_size=4, seed=2)
    a = train_mil(bags, cfg)
    b = train_mil(bags, cfg)
    assert all(np.array_equal(x.weight, y.weight) for x, y in zip(a.layers(), b.layers()))
    untouched = train_mil(bags, MilConfig(classifier_hidden=8, epochs=0, seed=2))
    fresh = init_classifier(6, 8, 2, seed=2)
    assert all(np.array_equal(x.weight, y.weight) for x, y in zip(untouched.layers(), fresh.layers()))


def test_train_mil_needs_two_classes() -> None:
    bags = [MilBag(np.zeros(3), "a", 0), MilBag(np.ones(3), "a", 0)]
    with pytest.raises(ConfigError):
        train_mil(bags, MilConfig(classifier_hidden=4, epochs=1))


def test_predict_slide_rejects_mixed_slides() -> None:
    classifier = init_classifier(2, 4, 2, seed=0)
    with pytest.raises(DataError):
        predict_slide(classifier, [MilBag(np.zeros(2), "a", 0), MilBag(np.zeros(2), "b", 0)])


def test_slide_truth_rejects_conflicting_labels() -> None:
    with pytest.raises(DataError):
        slide_truth([MilBag(np.zeros(2), "a", 0), MilBag(np.zeros(2), "a", 1)])


def test_classifier_payload_roundtrip() -> None:
    classifier = init_classifier(6, 5, 2, seed=3)
    payload = classifier_to_payload(classifier)
    assert payload["kind"] == "mil"
    assert [layer["name"] for layer in payload["layers"]] == ["mil.0", "mil.1", "mil.out"]
    restored = classifier_from_payload(json.loads(json.dumps(payload)))
    assert all(np.array_equal(x.weight, y.weight) for x, y in zip(classifier.layers(), restored.layers()))
    with pytest.raises(DataError):
        classifier_from_payload({**payload, "kind": "encoder"})
