"""Toy two-branch video segmentation net with learned score fusion.

A shared branch (two 3x3 same-padded convolutions with ReLU, then a 1x1
classifier) is applied to both frames of a window. The previous frame's
logits are bilinearly warped to the current frame and a 1x1 fusion layer
combines them with the current logits. Forward and backward are plain numpy.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import IGNORE, load_array, save_array
from .flowops import WarpOperator

FEATURE_DIM = 16
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "cls_w", "cls_b", "fuse_w", "fuse_b")


def param_shapes(num_classes, dim=FEATURE_DIM, in_channels=3):
    return {
        "conv1_w": (dim, in_channels, 3, 3),
        "conv1_b": (dim,),
        "conv2_w": (dim, dim, 3, 3),
        "conv2_b": (dim,),
        "cls_w": (num_classes, dim),
        "cls_b": (num_classes,),
        "fuse_w": (num_classes, 2 * num_classes),
        "fuse_b": (num_classes,),
    }


def init_params(num_classes, seed, dim=FEATURE_DIM, dtype=np.float64):
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for every tensor."""
    rng = np.random.default_rng([seed, 7])
    shapes = param_shapes(num_classes, dim)
    fan_in = {
        "conv1": 3 * 9, "conv2": dim * 9, "cls": dim, "fuse": 2 * num_classes,
    }
    params = {}
    for name in PARAM_NAMES:
        s = 1.0 / np.sqrt(fan_in[name.split("_")[0]])
        params[name] = rng.uniform(-s, s, size=shapes[name]).astype(dtype)
    return params


def _im2col(x):
    # x: (N, C, H, W) -> (N*H*W, C*9)
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, C * 9)


def conv3x3(x, w, b):
    """Same-padded 3x3 convolution. Returns ``(out, cols)``."""
    N, C, H, W = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(N, H, W, -1).transpose(0, 3, 1, 2), cols


def conv3x3_backward(dout, cols, w, x_shape, need_dx=True):
    N, D, H, W = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, D)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_dx:
        # full correlation with the flipped, channel-swapped kernel
        w_t = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx, _ = conv3x3(dout, w_t, np.zeros(w_t.shape[0], w.dtype))
    return dx, dw, db


@dataclass
class ForwardTrace:
    features: np.ndarray  # (2, D, H, W): [f_prev, f_t]
    logits: np.ndarray  # (2, C, H, W): per-frame logits
    warped_prev: np.ndarray  # (C, H, W)
    validity: np.ndarray  # (H, W) bool
    fused: np.ndarray  # (C, H, W)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def features_t(self):
        return self.features[1]


def frames_to_batch(frames, dtype=np.float64):
    """Stack ``(H, W, 3)`` frames into a centered ``(N, 3, H, W)`` batch."""
    return np.stack([np.asarray(f, dtype).transpose(2, 0, 1) for f in frames]) - dtype(0.5)


def branch_forward(params, batch):
    z1, cols1 = conv3x3(batch, params["conv1_w"], params["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = conv3x3(a1, params["conv2_w"], params["conv2_b"])
    f = np.maximum(z2, 0.0)
    logits = np.einsum("cd,ndhw->nchw", params["cls_w"], f, optimize=True) + params["cls_b"][None, :, None, None]
    return f, logits, dict(batch_shape=batch.shape, cols1=cols1, z1=z1, a1=a1, cols2=cols2, z2=z2)


def forward(params, frames, flow, warp=None):
    """Run the window ``(x_prev, x_t)`` with flow from ``t-1`` to ``t``.

    ``warp`` may pass a prebuilt :class:`WarpOperator` for ``flow``.
    """
    x_prev, x_t = frames
    if np.shape(x_prev) != np.shape(x_t):
        raise ValueError("frame shapes differ")
    H, W = np.shape(x_t)[:2]
    if np.shape(flow)[:2] != (H, W):
        raise ValueError(f"flow shape {np.shape(flow)} does not match frames {H}x{W}")
    batch = frames_to_batch(frames, params["conv1_w"].dtype.type)
    f, logits, cache = branch_forward(params, batch)
    op = warp if warp is not None else WarpOperator(flow, "bilinear")
    warped = op.apply(logits[0]).astype(logits.dtype, copy=False)
    C = logits.shape[1]
    stacked = np.concatenate([logits[1], warped], axis=0)
    fused = np.einsum("ck,khw->chw", params["fuse_w"], stacked, optimize=True) + params["fuse_b"][:, None, None]
    cache.update(op=op, stacked=stacked, num_classes=C)
    return ForwardTrace(features=f, logits=logits, warped_prev=warped, validity=op.validity, fused=fused, cache=cache)


def fused_previous(params, trace):
    """Fused logits of frame ``t-1`` on its own.

    Uses the first-frame convention of :func:`predict_clip` (paired with
    itself under zero flow), so it reuses the branch logits already in
    ``trace``.
    """
    C = trace.cache["num_classes"]
    w = params["fuse_w"]
    return np.einsum("ck,khw->chw", w[:, :C] + w[:, C:], trace.logits[0], optimize=True) + params["fuse_b"][:, None, None]


def backward(params, trace, grad_fused=None, grad_features_t=None):
    """Reverse-mode gradients for every parameter.

    ``grad_fused`` is the upstream gradient on the fused logits and
    ``grad_features_t`` an extra gradient injected on the current frame's
    features. Either may be ``None``.
    """
    cache = trace.cache
    C = cache["num_classes"]
    N, D, H, W = trace.features.shape
    grads = {}
    if grad_fused is None:
        grad_fused = np.zeros_like(trace.fused)
    if np.shape(grad_fused) != trace.fused.shape:
        raise ValueError("grad_fused shape mismatch")
    grads["fuse_w"] = np.einsum("chw,khw->ck", grad_fused, cache["stacked"], optimize=True)
    grads["fuse_b"] = grad_fused.sum(axis=(1, 2))
    g_stacked = np.einsum("ck,chw->khw", params["fuse_w"], grad_fused, optimize=True)
    g_logits = np.empty((N, C, H, W), grad_fused.dtype)
    g_logits[1] = g_stacked[:C]
    g_logits[0] = cache["op"].adjoint(g_stacked[C:])
    grads["cls_w"] = np.einsum("nchw,ndhw->cd", g_logits, trace.features, optimize=True)
    grads["cls_b"] = g_logits.sum(axis=(0, 2, 3))
    g_f = np.einsum("cd,nchw->ndhw", params["cls_w"], g_logits, optimize=True)
    if grad_features_t is not None:
        if np.shape(grad_features_t) != (D, H, W):
            raise ValueError("grad_features_t shape mismatch")
        g_f[1] += grad_features_t
    g_z2 = g_f * (cache["z2"] > 0)
    g_a1, grads["conv2_w"], grads["conv2_b"] = conv3x3_backward(g_z2, cache["cols2"], params["conv2_w"], cache["a1"].shape)
    g_z1 = g_a1 * (cache["z1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = conv3x3_backward(
        g_z1, cache["cols1"], params["conv1_w"], cache["batch_shape"], need_dx=False
    )
    return grads


def softmax(logits, axis=0):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_loss(logits, label):
    """Mean pixel cross-entropy over non-IGNORE pixels of ``(C, H, W)`` logits.

    Returns ``(loss, grad)``; an all-IGNORE label gives ``(0.0, zeros)``.
    """
    logits = np.asarray(logits)
    if logits.dtype.kind != "f":
        logits = logits.astype(np.float64)
    label = np.asarray(label)
    C = logits.shape[0]
    if label.shape != logits.shape[1:]:
        raise ValueError(f"label shape {label.shape} vs logits {logits.shape}")
    valid = label != IGNORE
    n = int(valid.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad
    if label[valid].max() >= C:
        raise ValueError("label id out of range")
    z = logits - logits.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=0))
    tgt = np.where(valid, label, 0).astype(np.int64)
    picked = np.take_along_axis(z, tgt[None], axis=0)[0]
    loss = float((logsum - picked)[valid].sum()) / n
    p = np.exp(z - logsum)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, tgt[None], 1.0, axis=0)
    grad = ((p - onehot) * valid / n).astype(logits.dtype, copy=False)
    return loss, grad


def predict_clip(params, frames, flows):
    """Fused logits for every frame of a clip.

    Frame 0 has no predecessor and is paired with itself under zero flow.
    """
    T = len(frames)
    out = []
    zero = np.zeros(np.shape(flows[0]) if len(flows) else np.shape(frames[0])[:2] + (2,))
    for t in range(T):
        if t == 0:
            tr = forward(params, (frames[0], frames[0]), zero)
        else:
            tr = forward(params, (frames[t - 1], frames[t]), flows[t - 1])
        out.append(tr.fused)
    return np.stack(out)


def save_checkpoint(params, path, iteration=0):
    os.makedirs(path, exist_ok=True)
    manifest = {"iteration": int(iteration), "params": []}
    for name in PARAM_NAMES:
        save_array(os.path.join(path, f"{name}.cmt"), params[name])
        manifest["params"].append({"name": name, "shape": list(params[name].shape)})
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    params = {}
    for entry in manifest["params"]:
        arr = load_array(os.path.join(path, f"{entry['name']}.cmt")).astype(np.float64)
        params[entry["name"]] = arr.reshape(entry["shape"])
    return params, manifest["iteration"]


def poly_lr(lr0, iteration, max_iter, power=0.9):
    if not 0 <= iteration < max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter})")
    return lr0 * (1.0 - iteration / max_iter) ** power


def sgd_step(params, grads, state, iteration, cfg):
    """Momentum SGD with L2 weight decay under the polynomial schedule.

    ``v = momentum * v + grad + weight_decay * param``; ``param -= lr * v``.
    Updates ``params`` and ``state`` in place and returns the learning rate.
    """
    lr = poly_lr(cfg.lr0, iteration, cfg.max_iter, cfg.poly_power)
    for name in PARAM_NAMES:
        g = grads[name] + cfg.weight_decay * params[name]
        v = state.get(name)
        v = g if v is None else cfg.momentum * v + g
        state[name] = v
        params[name] = params[name] - lr * v
    return lr
