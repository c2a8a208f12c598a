"""Offline target pseudo-labels with class-wise adaptive thresholds.

Thresholds follow an exponential moving average of a per-image quantile:
for every class predicted on at least ``gamma`` pixels of an image, the
confidence found at descending rank ``ceil(beta * n_c)`` is blended into the
running threshold with rate ``alpha``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import IGNORE

MAX_THRESHOLD = 0.999


@dataclass
class PseudoPolicyConfig:
    alpha: float = 0.2
    beta: float = 0.9
    gamma: int = 8
    init_threshold: float = 0.9

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must be in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class PseudoLabel:
    label: np.ndarray
    kept_fraction: float
    per_class_thresholds: np.ndarray


def initial_thresholds(num_classes, cfg):
    return np.full(num_classes, float(cfg.init_threshold))


def update_thresholds(thresholds, confidences, pred, cfg):
    """One image's worth of threshold updates. Returns a new array."""
    thresholds = np.array(thresholds, np.float64)
    confidences = np.asarray(confidences).ravel()
    pred = np.asarray(pred).ravel()
    for c in range(len(thresholds)):
        conf_c = confidences[pred == c]
        n = conf_c.size
        if n == 0 or n < cfg.gamma:
            continue
        rank = math.ceil(cfg.beta * n - 1e-9)
        kth = np.sort(conf_c)[::-1][max(rank, 1) - 1]
        thresholds[c] = (1.0 - cfg.alpha) * thresholds[c] + cfg.alpha * kth
    return thresholds


def generate_pseudo_label(confidences, pred, thresholds, cfg=None):
    """Keep pixels whose confidence reaches their class threshold (capped at
    0.999); everything else becomes ``IGNORE``."""
    confidences = np.asarray(confidences)
    pred = np.asarray(pred)
    thr = np.minimum(np.asarray(thresholds, np.float64), MAX_THRESHOLD)
    keep = confidences >= thr[pred]
    label = np.where(keep, pred, IGNORE).astype(np.uint8)
    return PseudoLabel(label=label, kept_fraction=float(keep.mean()), per_class_thresholds=thr.copy())


def fit_thresholds(conf_pred_pairs, num_classes, cfg):
    """Single pass over ``(confidence, prediction)`` images in order."""
    thr = initial_thresholds(num_classes, cfg)
    for conf, pred in conf_pred_pairs:
        thr = update_thresholds(thr, conf, pred, cfg)
    return thr


def predict_confidences(params, videos):
    """Max-softmax confidence and argmax class for every target frame.

    Returns two ``(N, T, H, W)`` arrays.
    """
    from .segmodel import predict_clip, softmax

    confs, preds = [], []
    for i in range(len(videos)):
        fused = predict_clip(params, videos.frames[i], videos.flows[i])
        prob = softmax(fused.astype(np.float64), axis=1)
        confs.append(prob.max(axis=1))
        preds.append(prob.argmax(axis=1).astype(np.uint8))
    return np.stack(confs), np.stack(preds)


def label_target_set(params, videos, num_classes, cfg):
    """Fit thresholds in clip order, then emit pseudo-labels for every frame.

    Returns ``(labels (N, T, H, W), thresholds, kept_fraction)``.
    """
    confs, preds = predict_confidences(params, videos)
    pairs = ((confs[i, t], preds[i, t]) for i in range(confs.shape[0]) for t in range(confs.shape[1]))
    thr = fit_thresholds(pairs, num_classes, cfg)
    labels = np.empty(preds.shape, np.uint8)
    for i in range(preds.shape[0]):
        for t in range(preds.shape[1]):
            labels[i, t] = generate_pseudo_label(confs[i, t], preds[i, t], thr, cfg).label
    kept = float(np.mean(labels != IGNORE))
    return labels, thr, kept


def summary_text(thresholds, labels, class_names=None):
    lines = ["class\tthreshold\tkept_pixels"]
    for c, th in enumerate(thresholds):
        name = class_names[c] if class_names else str(c)
        lines.append(f"{name}\t{th:.6f}\t{int((labels == c).sum())}")
    lines.append(f"kept_fraction\t{float(np.mean(labels != IGNORE)):.6f}")
    return "\n".join(lines) + "\n"
