import itertools
from types import SimpleNamespace

import numpy as np
import pytest

import numerics as nm
from errors import BatchError, ConfigError
from objectives import (Centers, LossWeights, attention_reg, center_loss, hardest_pairs, id_loss, total_loss,
                        triplet_batch_hard, update_centers)


def _exhaustive_triplet(features, labels, margin):
    losses = []
    for a in range(len(labels)):
        pos = [p for p in range(len(labels)) if p != a and labels[p] == labels[a]]
        neg = [n for n in range(len(labels)) if labels[n] != labels[a]]
        if not pos:
            continue
        d = np.linalg.norm(features[a] - features, axis=1)
        losses.append(max(0.0, d[pos].max() - d[neg].min() + margin))
    return float(np.mean(losses))


def test_triplet_matches_exhaustive_search(rng):
    checked = 0
    while checked < 200:
        B, d = rng.integers(2, 17), rng.integers(1, 9)
        labels = rng.integers(0, rng.integers(2, B + 1), B)
        # at least two classes and one anchor with a positive
        if np.unique(labels).size < 2 or np.unique(labels).size == B:
            continue
        features = rng.standard_normal((B, d))
        value = triplet_batch_hard(features, labels, margin=0.3).item()
        assert value == pytest.approx(_exhaustive_triplet(features, labels, 0.3), abs=1e-12)
        checked += 1


def test_triplet_skips_anchors_without_positive(rng):
    labels = np.array([0, 0, 1, 2])
    features = rng.standard_normal((4, 3))
    anchors, _, _ = hardest_pairs(features, labels)
    assert anchors.tolist() == [0, 1]
    with pytest.raises(BatchError):
        hardest_pairs(features, np.zeros(4))
    with pytest.raises(BatchError):
        hardest_pairs(features, np.arange(4))


def test_triplet_is_zero_for_separated_classes():
    features = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    assert triplet_batch_hard(features, [0, 0, 1, 1], margin=0.3).item() == 0.0


def test_id_loss_with_and_without_smoothing():
    logits = np.array([[2.0, 0.0, -1.0]])
    log_p = logits[0] - np.log(np.exp(logits[0]).sum())
    assert id_loss(logits, [0], 0.0).item() == pytest.approx(-log_p[0])
    expected = -(0.9 + 0.1 / 3) * log_p[0] - (0.1 / 3) * (log_p[1] + log_p[2])
    assert id_loss(logits, [0], 0.1).item() == pytest.approx(expected)
    # uniform logits give log C whatever the smoothing
    assert id_loss(np.zeros((2, 4)), [1, 3], 0.1).item() == pytest.approx(np.log(4))
    with pytest.raises(BatchError):
        id_loss(logits, [3], 0.1)


def test_center_loss_and_update():
    features = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0]])
    labels = np.array([0, 0, 1])
    centers = np.zeros((3, 2))
    assert center_loss(features, labels, centers).item() == pytest.approx((1 + 9 + 4) / 6)
    updated = update_centers(features, labels, centers, center_lr=0.5)
    np.testing.assert_allclose(updated, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(centers, 0.0)
    np.testing.assert_allclose(update_centers(features, labels, centers, 1.0)[:2], [[2.0, 0.0], [0.0, 2.0]])
    with pytest.raises(ValueError):
        update_centers(features, labels, centers, 0.0)
    with pytest.raises(BatchError):
        center_loss(features, np.array([0, 0, 3]), centers)


def test_attention_reg_on_one_hot_and_uniform():
    assert attention_reg(np.array([[1.0, 0.0, 0.0, 0.0], [0.25] * 4])).item() == pytest.approx((1 + 0.25) / 2)


def _outputs(rng, B=6, D=4, K=2, TD=8, C=3):
    global_out = SimpleNamespace(f=nm.Parameter(rng.standard_normal((B, D))),
                                 logits=nm.Parameter(rng.standard_normal((B, C))),
                                 alpha=nm.softmax(rng.standard_normal((B, 3)), axis=1))
    local_out = SimpleNamespace(f_parts=nm.Parameter(rng.standard_normal((B, K, TD))),
                                logits=[nm.Parameter(rng.standard_normal((B, C))) for _ in range(K)])
    centers = Centers(rng.standard_normal((C, D)), rng.standard_normal((K, C, TD)))
    return global_out, local_out, centers


def test_total_decomposes_into_reported_terms(rng):
    labels = np.array([0, 0, 1, 1, 2, 2])
    global_out, local_out, centers = _outputs(rng)
    weights = LossWeights(alpha=0.75, beta=0.01)
    total, parts = total_loss(global_out, local_out, labels, weights, centers)
    assert total.item() == pytest.approx(parts.recomputed_total(), abs=1e-12)
    assert parts.global_total == pytest.approx(parts.id + parts.triplet + 0.01 * parts.center + parts.attn)
    local = np.mean([i + t + 0.01 * c for i, t, c in zip(parts.part_id, parts.part_triplet, parts.part_center)])
    assert parts.local_total == pytest.approx(local)
    assert len(parts.part_id) == 2


def test_single_branch_totals(rng):
    labels = np.array([0, 0, 1, 1, 2, 2])
    global_out, local_out, centers = _outputs(rng)
    weights = LossWeights()
    _, parts = total_loss(global_out, local_out, labels, weights, centers)
    only_global, g = total_loss(global_out, None, labels, weights, centers, use_local=False)
    only_local, lo = total_loss(None, local_out, labels, weights, centers, use_global=False)
    assert only_global.item() == pytest.approx(parts.global_total)
    assert only_local.item() == pytest.approx(parts.local_total)
    assert g.part_id == [] and lo.id == 0.0
    with pytest.raises(ConfigError):
        total_loss(global_out, local_out, labels, weights, centers, use_global=False, use_local=False)
    with pytest.raises(BatchError):
        total_loss(global_out, local_out, labels[:1], weights, centers)


def test_total_loss_gradients(rng):
    labels = np.array([0, 0, 1, 1, 2, 2])
    global_out, local_out, centers = _outputs(rng)
    params = {"f": global_out.f, "logits": global_out.logits, "f_parts": local_out.f_parts}
    params.update({f"part_logits.{k}": z for k, z in enumerate(local_out.logits)})
    report = nm.gradient_check(lambda: total_loss(global_out, local_out, labels, LossWeights(), centers)[0],
                               params, epsilon=1e-5, floor=1e-3)
    assert report.passed, report.per_parameter


@pytest.mark.parametrize("field,value", [("alpha", 1.5), ("beta", -1.0), ("smoothing", 1.0), ("center_lr", 0.0)])
def test_loss_weight_validation(field, value):
    with pytest.raises(ConfigError):
        LossWeights(**{field: value}).validate()


def test_every_triplet_combination_checked(rng):
    # brute force over every (anchor, positive, negative) for a tiny batch
    labels = np.array([0, 0, 1, 1])
    features = rng.standard_normal((4, 2))
    worst = {}
    for a, p, n in itertools.product(range(4), repeat=3):
        if a != p and labels[a] == labels[p] and labels[n] != labels[a]:
            gap = np.linalg.norm(features[a] - features[p]) - np.linalg.norm(features[a] - features[n])
            worst[a] = max(worst.get(a, -np.inf), gap)
    expected = np.mean([max(0.0, g + 0.5) for g in worst.values()])
    assert triplet_batch_hard(features, labels, 0.5).item() == pytest.approx(expected)
