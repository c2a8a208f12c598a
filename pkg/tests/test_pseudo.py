import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmomlab.core import IGNORE
from cmomlab.pseudo import (
    PseudoPolicyConfig,
    fit_thresholds,
    generate_pseudo_label,
    initial_thresholds,
    update_thresholds,
)


def test_quantile_rank_example():
    cfg = PseudoPolicyConfig(alpha=1.0, beta=0.9, gamma=0)
    thr = update_thresholds([0.5], np.array([0.9, 0.8, 0.2]), np.zeros(3, int), cfg)
    assert thr[0] == 0.2


def test_ema_blend():
    cfg = PseudoPolicyConfig(alpha=0.2, beta=1.0, gamma=0)
    thr = update_thresholds([0.9], np.array([0.5, 0.6]), np.zeros(2, int), cfg)
    assert thr[0] == pytest.approx(0.8 * 0.9 + 0.2 * 0.5)


def test_gamma_gate():
    cfg = PseudoPolicyConfig(gamma=8)
    thr = update_thresholds([0.9, 0.9], np.full(5, 0.1), np.zeros(5, int), cfg)
    assert thr.tolist() == [0.9, 0.9]


def test_all_confident_kept():
    r = generate_pseudo_label(np.ones((3, 3)), np.zeros((3, 3), int), [1.0])
    assert r.kept_fraction == 1.0


def test_clamped_thresholds_drop_all():
    r = generate_pseudo_label(np.full((3, 3), 0.99), np.zeros((3, 3), int), [2.0])
    assert (r.label == IGNORE).all() and r.per_class_thresholds[0] == 0.999


def test_mixed_case_oracle():
    rng = np.random.default_rng(0)
    conf = rng.random((5, 5))
    pred = rng.integers(0, 3, (5, 5))
    thr = [0.3, 0.6, 0.9]
    r = generate_pseudo_label(conf, pred, thr)
    for y in range(5):
        for x in range(5):
            exp = pred[y, x] if conf[y, x] >= thr[pred[y, x]] else IGNORE
            assert r.label[y, x] == exp


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.01, 1.0), st.floats(0.05, 1.0))
def test_thresholds_stay_in_range(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    cfg = PseudoPolicyConfig(alpha=alpha, beta=beta, gamma=2)
    pairs = [(rng.random((4, 4)), rng.integers(0, 3, (4, 4))) for _ in range(5)]
    thr = fit_thresholds(pairs, 3, cfg)
    assert np.all(thr >= 0) and np.all(thr <= 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16))
def test_higher_thresholds_keep_subset(seed):
    rng = np.random.default_rng(seed)
    conf, pred = rng.random((6, 6)), rng.integers(0, 3, (6, 6))
    lo = rng.random(3)
    hi = lo + rng.random(3) * 0.5
    a = generate_pseudo_label(conf, pred, lo).label != IGNORE
    b = generate_pseudo_label(conf, pred, hi).label != IGNORE
    assert not (b & ~a).any()


def test_initial_thresholds():
    assert initial_thresholds(3, PseudoPolicyConfig(init_threshold=0.7)).tolist() == [0.7] * 3
