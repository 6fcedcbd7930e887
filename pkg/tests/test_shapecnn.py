import math

import numpy as np
import pytest

from mammoseg.autodiff import Tensor
from mammoseg.errors import ConfigurationError, ContractViolation
from mammoseg.shapecnn import (PUBLISHED_CLASSIFIER_PARAMS, ClassifierSpec, ClassifierTrainConfig,
                               build_classifier, class_weights, classifier_gradcheck, classify_mask,
                               pooled_confusion, prepare_masks, stratified_kfold, train_classifier,
                               weighted_cross_entropy)


def test_published_parameter_count():
    spec = ClassifierSpec()
    assert spec.expected_parameter_count() == PUBLISHED_CLASSIFIER_PARAMS == 767_684
    assert build_classifier(spec, np.random.default_rng(0)).num_parameters() == 767_684
    assert spec.spatial_trace() == [64, 64, 16, 16, 4, 1]
    with pytest.raises(ConfigurationError):
        ClassifierSpec(input_size=32)


def test_zero_input_gives_probability_row():
    net = build_classifier(ClassifierSpec(), np.random.default_rng(0))
    net.eval()
    p = net(Tensor(np.zeros((1, 1, 64, 64), np.float32))).data
    assert p.shape == (1, 4) and p.sum() == pytest.approx(1.0, abs=1e-6)


def test_class_weight_examples():
    np.testing.assert_allclose(np.round(class_weights([504, 473, 115, 76]), 4),
                               [0.5685, 0.5950, 0.9015, 0.9349])
    np.testing.assert_allclose(class_weights([7, 7, 7, 7]), 0.75)
    assert class_weights([5, 0, 3, 2])[1] == 1.0
    with pytest.raises(ContractViolation):
        class_weights([0, 0, 0, 0])


def test_weighted_cross_entropy_examples():
    w = np.array([0.2, 0.4, 0.6, 0.8])
    assert weighted_cross_entropy(Tensor(np.eye(4)), [0, 1, 2, 3], w).item() == pytest.approx(0.0, abs=1e-6)
    uniform = Tensor(np.full((1, 4), 0.25))
    for c in range(4):
        assert weighted_cross_entropy(uniform, [c], w, eps=0).item() == pytest.approx(w[c] * math.log(4))
    probs = Tensor(np.random.default_rng(0).dirichlet(np.ones(4), 5))
    y = [0, 1, 2, 3, 0]
    one = weighted_cross_entropy(probs, y, w).item()
    assert weighted_cross_entropy(probs, y, 2 * w).item() == pytest.approx(2 * one)


def test_stratified_folds_divisible_case():
    labels = np.repeat(np.arange(4), 25)
    plan = stratified_kfold(labels, 5, np.random.default_rng(0))
    for f in range(5):
        te = plan.test_indices(f)
        assert np.array_equal(np.bincount(labels[te], minlength=4), [5, 5, 5, 5])
        assert set(te).isdisjoint(plan.train_indices(f))
    assert sorted(np.concatenate([te for _, te in plan.splits()]).tolist()) == list(range(100))


def test_stratified_folds_uneven_counts_stay_balanced():
    labels = np.repeat(np.arange(4), [13, 9, 7, 5])
    plan = stratified_kfold(labels, 5, np.random.default_rng(2))
    sizes = [plan.test_indices(f).size for f in range(5)]
    assert max(sizes) - min(sizes) <= 1
    for c, n in enumerate([13, 9, 7, 5]):
        per = [np.sum(labels[plan.test_indices(f)] == c) for f in range(5)]
        assert max(per) - min(per) <= 1 and sum(per) == n


def test_stratified_guards():
    with pytest.raises(ConfigurationError):
        stratified_kfold(np.zeros(20, int), 5)
    with pytest.raises(ConfigurationError):
        stratified_kfold(np.array([0, 0, 0, 1, 1]), 3)
    with pytest.raises(ConfigurationError):
        stratified_kfold(np.array([0, 1, 0, 1]), 1)


def test_prepare_masks_resizes_to_binary_stack():
    m = np.zeros((128, 128), np.uint8)
    m[30:90, 40:100] = 1
    x = prepare_masks([m, m[:64, :64]])
    assert x.shape == (2, 1, 64, 64) and x.dtype == np.float32
    assert set(np.unique(x)) == {0.0, 1.0}


def _toy_masks(per_class, seed=0):
    # four classes separable by area: squares of side 3, 6, 9 and 12
    rng = np.random.default_rng(seed)
    masks, labels = [], []
    for c in range(4):
        for _ in range(per_class):
            m = np.zeros((16, 16), np.uint8)
            s = 3 + 3 * c
            y0, x0 = rng.integers(0, 16 - s, 2)
            m[y0 : y0 + s, x0 : x0 + s] = 1
            masks.append(m)
            labels.append(c)
    return masks, np.array(labels)


def test_kfold_training_is_deterministic_and_learns():
    spec = ClassifierSpec(input_size=16, filters=(8, 16, 16), pool=2, hidden=16, dropout=0.0)
    cfg = ClassifierTrainConfig(epochs=20, folds=2, batch_size=8, lr=3e-3)
    masks, labels = _toy_masks(16)
    a = train_classifier(masks, labels, spec, cfg)
    b = train_classifier(masks, labels, spec, cfg)
    assert len(a) == 2
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.probs, rb.probs)
    cm = pooled_confusion(a)
    assert cm.sum() == len(labels)
    assert np.trace(cm) / cm.sum() > 0.5  # chance is 0.25
    label, probs = classify_mask(a[0].model, np.zeros((16, 16), np.uint8))
    assert label in ("irregular", "lobular", "oval", "round")
    assert probs.sum() == pytest.approx(1.0)


def test_classifier_gradcheck_passes():
    for seed in range(3):
        assert classifier_gradcheck(seed) <= 1e-4
