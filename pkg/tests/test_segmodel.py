import math

import numpy as np
import pytest

from cmomlab import segmodel
from cmomlab.segmodel import (
    PARAM_NAMES,
    backward,
    cross_entropy_loss,
    forward,
    init_params,
    poly_lr,
)

C = 4


def random_window(rng, h=8, w=8):
    frames = (rng.random((h, w, 3)), rng.random((h, w, 3)))
    flow = rng.uniform(-1.5, 1.5, (h, w, 2))
    return frames, flow


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_identity_fusion_returns_current_logits(rng):
    p = init_params(C, 0)
    p["fuse_w"] = np.hstack([np.eye(C), np.zeros((C, C))])
    p["fuse_b"] = np.zeros(C)
    frames, flow = random_window(rng)
    tr = forward(p, frames, flow)
    np.testing.assert_allclose(tr.fused, tr.logits[1], atol=1e-12)


def test_zero_flow_identical_frames(rng):
    p = init_params(C, 1)
    x = rng.random((8, 8, 3))
    tr = forward(p, (x, x), np.zeros((8, 8, 2)))
    np.testing.assert_allclose(tr.warped_prev, tr.logits[0], atol=1e-12)
    np.testing.assert_allclose(tr.logits[0], tr.logits[1], atol=1e-12)


def test_output_shape_and_finite(rng):
    p = init_params(C, 2)
    frames, flow = random_window(rng)
    tr = forward(p, frames, flow)
    assert tr.fused.shape == (C, 8, 8) and np.isfinite(tr.fused).all()
    assert tr.features.shape == (2, segmodel.FEATURE_DIM, 8, 8)


def test_forward_rejects_bad_flow(rng):
    p = init_params(C, 0)
    frames, _ = random_window(rng)
    with pytest.raises(ValueError):
        forward(p, frames, np.zeros((4, 4, 2)))


def test_zero_upstream_gives_zero_grads(rng):
    p = init_params(C, 3)
    frames, flow = random_window(rng)
    grads = backward(p, forward(p, frames, flow))
    assert all(not np.any(g) for g in grads.values())


def test_feature_only_gradient_paths(rng):
    p = init_params(C, 4)
    frames, flow = random_window(rng)
    tr = forward(p, frames, flow)
    grads = backward(p, tr, None, rng.standard_normal(tr.features_t.shape))
    for k in ("cls_w", "cls_b", "fuse_w", "fuse_b"):
        assert not np.any(grads[k])
    for k in ("conv1_w", "conv2_w"):
        assert np.any(grads[k])


def scalar_objective(p, frames, flow, g_fused, g_feat):
    tr = forward(p, frames, flow)
    return float((tr.fused * g_fused).sum() + (tr.features_t * g_feat).sum())


def finite_difference_check(seed, n_coords=12, eps=1e-6):
    rng = np.random.default_rng(seed)
    p = init_params(C, seed)
    frames, flow = random_window(rng)
    tr = forward(p, frames, flow)
    g_fused = rng.standard_normal(tr.fused.shape)
    g_feat = rng.standard_normal(tr.features_t.shape)
    grads = backward(p, tr, g_fused, g_feat)
    errors = []
    for _ in range(n_coords):
        name = PARAM_NAMES[rng.integers(len(PARAM_NAMES))]
        idx = tuple(rng.integers(0, s) for s in p[name].shape)
        orig = p[name][idx]
        p[name][idx] = orig + eps
        up = scalar_objective(p, frames, flow, g_fused, g_feat)
        p[name][idx] = orig - eps
        down = scalar_objective(p, frames, flow, g_fused, g_feat)
        p[name][idx] = orig
        errors.append(rel_err(grads[name][idx], (up - down) / (2 * eps)))
    return errors


@pytest.mark.parametrize("seed", range(10))
def test_full_backward_matches_finite_differences(seed):
    errors = finite_difference_check(seed)
    assert max(errors) < 1e-3


def test_one_hot_logit_gradient(rng):
    p = init_params(C, 5)
    frames, flow = random_window(rng)
    tr = forward(p, frames, flow)
    g = np.zeros_like(tr.fused)
    g[2, 3, 4] = 1.0
    grads = backward(p, tr, g)
    eps = 1e-4
    for name in PARAM_NAMES:
        idx = tuple(rng.integers(0, s) for s in p[name].shape)
        orig = p[name][idx]
        p[name][idx] = orig + eps
        up = forward(p, frames, flow).fused[2, 3, 4]
        p[name][idx] = orig - eps
        down = forward(p, frames, flow).fused[2, 3, 4]
        p[name][idx] = orig
        num = (up - down) / (2 * eps)
        assert abs(num - grads[name][idx]) <= 1e-4 * max(1.0, abs(num))


def test_cross_entropy_uniform():
    loss, _ = cross_entropy_loss(np.zeros((5, 2, 3)), np.zeros((2, 3), np.uint8))
    assert loss == pytest.approx(math.log(5))


def test_cross_entropy_large_margin():
    logits = np.zeros((3, 2, 2))
    logits[1] = 100.0
    assert cross_entropy_loss(logits, np.ones((2, 2), np.uint8))[0] < 1e-30


def test_cross_entropy_all_ignore():
    loss, g = cross_entropy_loss(np.ones((3, 2, 2)), np.full((2, 2), 255, np.uint8))
    assert loss == 0.0 and not g.any()


def test_cross_entropy_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 4, 4))
    label = rng.integers(0, 4, (4, 4)).astype(np.uint8)
    label[0, 0] = 255
    terms = []
    for y in range(4):
        for x in range(4):
            if label[y, x] == 255:
                continue
            z = logits[:, y, x]
            terms.append(-z[label[y, x]] + math.log(sum(math.exp(v) for v in z)))
    loss, grad = cross_entropy_loss(logits, label)
    assert loss == pytest.approx(sum(terms) / len(terms), abs=1e-6)
    eps = 1e-6
    lp, lm = logits.copy(), logits.copy()
    lp[1, 2, 3] += eps
    lm[1, 2, 3] -= eps
    num = (cross_entropy_loss(lp, label)[0] - cross_entropy_loss(lm, label)[0]) / (2 * eps)
    assert num == pytest.approx(grad[1, 2, 3], abs=1e-7)


def test_poly_lr_values():
    assert poly_lr(5e-4, 0, 2000) == 5e-4
    assert poly_lr(5e-4, 1000, 2000) == pytest.approx(2.678e-4, rel=1e-3)
    assert poly_lr(5e-4, 1999, 2000) < 5e-6
    with pytest.raises(ValueError):
        poly_lr(5e-4, 2000, 2000)


def test_sgd_step_momentum():
    class Cfg:
        lr0, max_iter, poly_power, momentum, weight_decay = 0.1, 10, 1.0, 0.9, 0.0

    p = {k: np.ones(1) for k in PARAM_NAMES}
    g = {k: np.ones(1) for k in PARAM_NAMES}
    state = {}
    segmodel.sgd_step(p, g, state, 0, Cfg)
    assert p["cls_w"][0] == pytest.approx(0.9)
    segmodel.sgd_step(p, g, state, 1, Cfg)
    # v = 0.9 * 1 + 1, lr = 0.1 * 0.9
    assert p["cls_w"][0] == pytest.approx(0.9 - 0.09 * 1.9)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(C, 0, dtype=np.float32)
    segmodel.save_checkpoint(p, tmp_path / "ck", 17)
    q, it = segmodel.load_checkpoint(tmp_path / "ck")
    assert it == 17
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(q[k], p[k])


def test_predict_clip_shape(rng):
    p = init_params(C, 0)
    frames = rng.random((3, 8, 8, 3))
    flows = np.zeros((2, 8, 8, 2))
    assert segmodel.predict_clip(p, frames, flows).shape == (3, C, 8, 8)


def test_fused_previous_matches_self_paired_window(rng):
    p = init_params(C, 3)
    frames, flow = random_window(rng)
    tr = forward(p, frames, flow)
    alone = forward(p, (frames[0], frames[0]), np.zeros_like(flow))
    np.testing.assert_allclose(segmodel.fused_previous(p, tr), alone.fused, atol=1e-12)
