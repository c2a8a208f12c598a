"""Cross-domain class mixing of video windows (CMOM) and its single-frame
DACS counterpart."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE
from .synthgen import CATEGORIES

CLASS_FILTERS = ("all", "things", "stuffs", "movable", "stationary")
_FILTER_KEY = {"things": "thing", "stuffs": "stuff", "movable": "movable", "stationary": "stationary"}


@dataclass
class MixConfig:
    class_ratio: float = 0.75
    class_filter: str = "all"
    tau: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.class_ratio <= 1.0:
            raise ValueError("class_ratio must lie in [0, 1]")
        if self.class_filter not in CLASS_FILTERS:
            raise ValueError(f"class_filter must be one of {CLASS_FILTERS}")
        if self.tau != 1:
            raise ValueError("only tau=1 windows are supported")


@dataclass
class MixResult:
    mixed_frames: tuple  # (x_prev, x_t)
    mixed_label: np.ndarray
    mixed_flow: np.ndarray
    masks: tuple  # (M_prev, M_t), bool
    selected_classes: frozenset = field(default_factory=frozenset)


def selection_rng(cfg, counter):
    """Generator for draw number ``counter`` under ``cfg.rng_seed``."""
    return np.random.default_rng([cfg.rng_seed, counter])


def _allowed(cfg, categories):
    if cfg.class_filter == "all":
        return None
    return set(categories[_FILTER_KEY[cfg.class_filter]])


def select_classes(source_label_t, cfg, rng, categories=CATEGORIES):
    """Pick ``ceil(ratio * |P|)`` classes uniformly from the classes present.

    ``rng`` is a numpy Generator or an integer draw counter (combined with
    ``cfg.rng_seed``).
    """
    if not isinstance(rng, np.random.Generator):
        rng = selection_rng(cfg, rng)
    present = [int(c) for c in np.unique(source_label_t) if c != IGNORE]
    allowed = _allowed(cfg, categories)
    if allowed is not None:
        present = [c for c in present if c in allowed]
    k = math.ceil(cfg.class_ratio * len(present) - 1e-12)
    if k == 0:
        return frozenset()
    picked = rng.choice(len(present), size=k, replace=False)
    return frozenset(present[i] for i in picked)


def class_mask(label, selected):
    label = np.asarray(label)
    if not selected:
        return np.zeros(label.shape, bool)
    return np.isin(label, sorted(selected))


def build_masks(source_labels, selected):
    y_prev, y_t = (np.asarray(y) for y in source_labels)
    if y_prev.shape != y_t.shape:
        raise ValueError(f"label shapes differ: {y_prev.shape} vs {y_t.shape}")
    return class_mask(y_prev, selected), class_mask(y_t, selected)


def paste(mask, src, dst):
    """``mask * src + (1 - mask) * dst`` with a boolean mask broadcast over
    trailing channel axes."""
    src, dst = np.asarray(src), np.asarray(dst)
    if src.shape != dst.shape:
        raise ValueError(f"shape mismatch {src.shape} vs {dst.shape}")
    m = mask.reshape(mask.shape + (1,) * (src.ndim - mask.ndim))
    return np.where(m, src, dst)


def mix_cmom(source, target, target_pseudo_label_t, cfg, rng):
    """Mix a source window into a target window with one class set.

    ``source`` and ``target`` are ``(frames, labels_or_None, flow)`` triples
    for the window ``(t-1, t)``: ``frames`` is a pair of ``(H, W, 3)`` arrays,
    ``flow`` the flow into frame ``t``. Only the source labels are read.
    """
    (xs_prev, xs_t), (ys_prev, ys_t), o_s = source
    (xt_prev, xt_t), _, o_t = target
    if np.shape(target_pseudo_label_t) != np.shape(ys_t):
        raise ValueError("pseudo-label and source label shapes differ")
    selected = select_classes(ys_t, cfg, rng)
    m_prev, m_t = build_masks((ys_prev, ys_t), selected)
    return MixResult(
        mixed_frames=(paste(m_prev, xs_prev, xt_prev), paste(m_t, xs_t, xt_t)),
        mixed_label=paste(m_t, ys_t, target_pseudo_label_t),
        mixed_flow=paste(m_prev, o_s, o_t),
        masks=(m_prev, m_t),
        selected_classes=selected,
    )


def mix_dacs(source_frame_t, target_frame_t, source_label_t, target_pseudo_label_t, cfg, rng):
    """Single-frame class mix. Returns ``(x_mixed, y_mixed, mask)``; pass
    ``None`` as the pseudo-label to mix frames only."""
    selected = select_classes(source_label_t, cfg, rng)
    m = class_mask(source_label_t, selected)
    x = paste(m, source_frame_t, target_frame_t)
    y = None if target_pseudo_label_t is None else paste(m, source_label_t, target_pseudo_label_t)
    return x, y, m


def mix_dacs_window(source, target, target_pseudo_label_t, cfg, rng):
    """Image-level baseline applied frame by frame: each frame draws its own
    class set. The flow is mixed with the previous frame's mask, the same rule
    as the video mix."""
    if not isinstance(rng, np.random.Generator):
        rng = selection_rng(cfg, rng)
    (xs_prev, xs_t), (ys_prev, ys_t), o_s = source
    (xt_prev, xt_t), _, o_t = target
    x_prev, _, m_prev = mix_dacs(xs_prev, xt_prev, ys_prev, None, cfg, rng)
    x_t, y_t, m_t = mix_dacs(xs_t, xt_t, ys_t, target_pseudo_label_t, cfg, rng)
    sel = frozenset(int(c) for c in np.unique(np.asarray(ys_t)[m_t]))
    return MixResult(
        mixed_frames=(x_prev, x_t),
        mixed_label=y_t,
        mixed_flow=paste(m_prev, o_s, o_t),
        masks=(m_prev, m_t),
        selected_classes=sel,
    )


def mixed_label_pair(result, source_labels, target_labels):
    """Label maps of both mixed frames, given full label pairs for the two
    input windows. Used to score temporal consistency of a mix."""
    m_prev, m_t = result.masks
    return (paste(m_prev, source_labels[0], target_labels[0]),
            paste(m_t, source_labels[1], target_labels[1]))
