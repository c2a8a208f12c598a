import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmomlab import fatc
from cmomlab.fatc import FeatureBank, FeatureCentroid, compute_centroids, feature_alignment_loss
from oracles import exhaustive_loss


def cen(values, cls=0, mask=None):
    return FeatureCentroid(cls=cls, instance=0, values=np.asarray(values, float), mask=mask)


def test_uniform_feature_centroid():
    f = np.ones((3, 4, 4)) * np.array([1.0, 2.0, 3.0])[:, None, None]
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    np.testing.assert_array_equal(compute_centroids(f, [m])[0].values, [1, 2, 3])


def test_two_pixel_centroid():
    f = np.zeros((2, 1, 2))
    f[:, 0, 0] = (0, 2)
    f[:, 0, 1] = (2, 0)
    np.testing.assert_array_equal(compute_centroids(f, [np.ones((1, 2), bool)])[0].values, [1, 1])


def test_random_centroid_oracle():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((5, 4, 4))
    m = rng.random((4, 4)) < 0.5
    ref = [sum(f[d, y, x] for y in range(4) for x in range(4) if m[y, x]) / m.sum() for d in range(5)]
    np.testing.assert_allclose(compute_centroids(f, [m], cls=2)[0].values, ref, atol=1e-6)
    assert compute_centroids(f, [np.zeros((4, 4), bool)]) == []


def test_source_valid_mask():
    c = np.full((3, 3), 4)
    assert fatc.source_valid_mask(c, c, 4).all()
    assert not fatc.source_valid_mask(c, c + 1, 4).any()
    pred = np.indices((4, 4)).sum(0) % 2
    truth = np.zeros((4, 4), int)
    np.testing.assert_array_equal(fatc.source_valid_mask(pred, truth, 0), (pred == 0) & (truth == 0))


def test_fifo_capacity_two():
    bank = FeatureBank(1, capacity=2)
    for v in (1, 2, 3):
        bank.push(cen([v]))
    assert bank.entries(0)[:, 0].tolist() == [2, 3]


def test_queues_independent():
    bank = FeatureBank(1, capacity=2)
    bank.push(cen([1], cls=0))
    bank.push(cen([2], cls=1))
    assert bank.entries(0)[:, 0].tolist() == [1] and bank.entries(1)[:, 0].tolist() == [2]
    assert bank.occupancy() == {0: 1, 1: 1} and len(bank) == 2


def test_hundred_pushes_replay():
    bank = FeatureBank(1, capacity=50)
    for v in range(1, 101):
        bank.push(cen([v]))
    assert bank.entries(0)[:, 0].tolist() == list(range(51, 101))


def test_push_dimension_mismatch():
    with pytest.raises(ValueError):
        FeatureBank(2).push(cen([1.0, 2.0, 3.0]))


def test_loss_zero_for_exact_match():
    bank = FeatureBank(2)
    bank.push(cen([1, 1]))
    loss, grads = feature_alignment_loss([cen([1, 1])], bank)
    assert loss == 0 and not np.any(grads[0])


def test_loss_hand_example():
    bank = FeatureBank(2)
    bank.push(cen([0, 0]))
    bank.push(cen([3, 3]))
    loss, grads = feature_alignment_loss([cen([1, 1])], bank)
    assert loss == 2 and grads[0].tolist() == [1, 1]
    loss, _ = feature_alignment_loss([cen([1, 1]), cen([4, 4])], bank)
    assert loss == 2


def test_empty_bank_class_contributes_nothing():
    bank = FeatureBank(2)
    bank.push(cen([0, 0], cls=1))
    loss, grads = feature_alignment_loss([cen([5, 5], cls=0)], bank)
    assert loss == 0 and not np.any(grads[0])


def test_mean_reduction():
    bank = FeatureBank(1)
    bank.push(cen([0], cls=0))
    bank.push(cen([0], cls=1))
    c = [cen([2], cls=0), cen([4], cls=1)]
    assert feature_alignment_loss(c, bank)[0] == 6
    assert feature_alignment_loss(c, bank, "mean")[0] == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16))
def test_loss_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    bank = FeatureBank(3, capacity=5)
    for _ in range(12):
        bank.push(cen(rng.integers(-4, 5, 3), cls=int(rng.integers(0, 3))))
    cents = [cen(rng.integers(-4, 5, 3), cls=int(rng.integers(0, 4))) for _ in range(6)]
    assert feature_alignment_loss(cents, bank)[0] == exhaustive_loss(cents, bank)


def loss_of_features(features, masks, classes, bank):
    cents = []
    for m, c in zip(masks, classes):
        cents.extend(compute_centroids(features, [m], c))
    return feature_alignment_loss(cents, bank)[0], cents


@pytest.mark.parametrize("seed", range(10))
def test_feature_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    D = 4
    features = rng.standard_normal((D, 8, 8))
    masks = [rng.random((8, 8)) < 0.3 for _ in range(3)]
    classes = [0, 0, 1]
    bank = FeatureBank(D)
    for c in (0, 1):
        for _ in range(3):
            bank.push(cen(rng.standard_normal(D), cls=c))
    loss, cents = loss_of_features(features, masks, classes, bank)
    _, grads = feature_alignment_loss(cents, bank)
    g = fatc.centroid_feature_gradient(cents, grads, features.shape)
    eps = 1e-6
    coords = [tuple(rng.integers(0, s) for s in features.shape) for _ in range(10)]
    for idx in coords:
        fp, fm = features.copy(), features.copy()
        fp[idx] += eps
        fm[idx] -= eps
        num = (loss_of_features(fp, masks, classes, bank)[0] - loss_of_features(fm, masks, classes, bank)[0]) / (2 * eps)
        assert abs(num - g[idx]) <= 1e-3 * max(1.0, abs(num))
