"""Class-instance feature centroids, the source feature bank and the L1
nearest-prototype alignment loss."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class FeatureCentroid:
    cls: int
    instance: int
    values: np.ndarray
    # the instance mask the centroid was averaged over (needed for backprop)
    mask: np.ndarray = None


class FeatureBank:
    """Per-class FIFO queues of source centroids."""

    def __init__(self, dim, capacity=50):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.queues = {}

    def push(self, centroid):
        values = np.asarray(centroid.values, np.float64)
        if values.shape != (self.dim,):
            raise ValueError(f"centroid has shape {values.shape}, bank expects ({self.dim},)")
        q = self.queues.setdefault(int(centroid.cls), deque(maxlen=self.capacity))
        q.append(values.copy())

    def entries(self, cls):
        q = self.queues.get(int(cls))
        if not q:
            return np.zeros((0, self.dim))
        return np.stack(q)

    def __len__(self):
        return sum(len(q) for q in self.queues.values())

    def occupancy(self):
        return {c: len(q) for c, q in sorted(self.queues.items())}


def bank_push(bank, centroid):
    bank.push(centroid)


def compute_centroids(features, instance_masks, cls=-1):
    """Masked mean of ``features`` (``(D, H, W)``) over each instance mask."""
    features = np.asarray(features)
    out = []
    flat = features.reshape(features.shape[0], -1)
    for k, m in enumerate(instance_masks):
        m = np.asarray(m)
        w = m.reshape(-1).astype(np.float64)
        s = w.sum()
        if s <= 0:
            continue
        out.append(FeatureCentroid(cls=cls, instance=k, values=flat @ w / s, mask=m))
    return out


def source_valid_mask(pred, truth, c):
    return (np.asarray(pred) == c) & (np.asarray(truth) == c)


def nearest_entries(queries, entries):
    """L1 distances to the nearest bank entry and its index, per query row."""
    d = np.abs(queries[:, None, :] - entries[None, :, :]).sum(axis=-1)
    j = d.argmin(axis=1)
    return d[np.arange(len(queries)), j], j


def feature_alignment_loss(mixed_centroids, bank, class_reduction="sum"):
    """Nearest-prototype L1 loss.

    For every class with ``k`` mixed centroids and a nonempty bank queue the
    contribution is ``sum_i min_j |F_i - B_j|_1 / k``. Class contributions are
    summed (or averaged with ``class_reduction="mean"``).

    Returns ``(loss, grads)`` with one gradient vector per input centroid, in
    input order.
    """
    if class_reduction not in ("sum", "mean"):
        raise ValueError("class_reduction must be 'sum' or 'mean'")
    grads = [np.zeros(bank.dim) for _ in mixed_centroids]
    by_class = {}
    for i, cen in enumerate(mixed_centroids):
        if np.shape(cen.values) != (bank.dim,):
            raise ValueError(f"centroid dimension {np.shape(cen.values)} != bank dimension {bank.dim}")
        by_class.setdefault(int(cen.cls), []).append(i)
    total = 0.0
    active = 0
    for c, idx in by_class.items():
        entries = bank.entries(c)
        if len(entries) == 0:
            continue
        q = np.stack([np.asarray(mixed_centroids[i].values, np.float64) for i in idx])
        dist, j = nearest_entries(q, entries)
        k = len(idx)
        total += float(dist.sum()) / k
        active += 1
        g = np.sign(q - entries[j]) / k
        for row, i in enumerate(idx):
            grads[i] = g[row]
    if class_reduction == "mean" and active:
        total /= active
        grads = [g / active for g in grads]
    return total, grads


def centroid_feature_gradient(centroids, grads, shape):
    """Chain the per-centroid gradients back onto a ``(D, H, W)`` feature map."""
    out = np.zeros(shape)
    D = shape[0]
    flat = out.reshape(D, -1)
    for cen, g in zip(centroids, grads):
        if not np.any(g):
            continue
        w = np.asarray(cen.mask).reshape(-1).astype(np.float64)
        flat += np.outer(g, w / w.sum())
    return out


def save_bank(bank, path):
    """Write each class queue as an ``(n, dim)`` tensor plus a manifest."""
    import json
    import os

    from .core import save_array

    os.makedirs(path, exist_ok=True)
    occ = bank.occupancy()
    for c in occ:
        save_array(os.path.join(path, f"class_{c:02d}.cmt"), bank.entries(c).astype(np.float32))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump({"dim": bank.dim, "capacity": bank.capacity, "classes": list(occ)}, fh, indent=1)


def load_bank(path):
    import json
    import os

    from .core import load_array

    with open(os.path.join(path, "manifest.json")) as fh:
        m = json.load(fh)
    bank = FeatureBank(m["dim"], m["capacity"])
    for c in m["classes"]:
        for k, row in enumerate(load_array(os.path.join(path, f"class_{c:02d}.cmt"))):
            bank.push(FeatureCentroid(cls=c, instance=k, values=row))
    return bank
