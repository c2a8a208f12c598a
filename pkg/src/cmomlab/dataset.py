"""On-disk dataset layout, in-memory loading, and the target-label firewall.

Layout::

    root/meta.json
    root/source/clip_NNNN/{frame,label,flow}_TT.cmt
    root/target/clip_NNNN/{frame,label,flow}_TT.cmt
    root/target/manifest.json        # train / eval split, forbidden labels
    root/pseudo/clip_NNNN/plabel_TT.cmt
    root/pseudo/summary.txt

Flow ``flow_TT`` maps frame ``TT-1`` to ``TT`` and is absent for ``TT=0``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import load_array, save_array
from .synthgen import CATEGORIES, ClipSample

ROLES = ("trainer", "eval", "audit")


class FirewallError(PermissionError):
    """A code path tried to read target labels it is not entitled to."""


class MissingPseudoLabels(FileNotFoundError):
    pass


@dataclass
class VideoSet:
    frames: np.ndarray  # (N, T, H, W, 3)
    flows: np.ndarray  # (N, T-1, H, W, 2)
    labels: np.ndarray = None  # (N, T, H, W) or None when withheld

    def __len__(self):
        return self.frames.shape[0]

    def clip(self, i):
        return ClipSample(
            frames=self.frames[i],
            labels=None if self.labels is None else self.labels[i],
            flows=self.flows[i],
        )


@dataclass
class TrainingData:
    source: VideoSet
    target: VideoSet  # never carries labels
    num_classes: int
    categories: dict
    pseudo: np.ndarray = None  # (N_target, T, H, W)


def load_meta(root):
    with open(os.path.join(root, "meta.json")) as fh:
        return json.load(fh)


def _clip_dir(root, domain, idx):
    return os.path.join(root, domain, f"clip_{idx:04d}")


class DatasetReader:
    """Clip-level access to a dataset directory.

    ``role`` decides which target labels may be opened: ``trainer`` none,
    ``eval`` only the held-out eval clips, ``audit`` (tests and diagnostics)
    everything.
    """

    def __init__(self, root, role="trainer"):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        self.root = root
        self.role = role
        self.meta = load_meta(root)
        with open(os.path.join(root, "target", "manifest.json")) as fh:
            self.manifest = json.load(fh)
        self.num_frames = self.meta["num_frames"]

    def source_ids(self):
        return list(range(self.meta["n_source"]))

    def target_ids(self, split="train"):
        return list(self.manifest[split])

    def _read(self, domain, idx, with_labels):
        d = _clip_dir(self.root, domain, idx)
        T = self.num_frames
        frames = np.stack([load_array(os.path.join(d, f"frame_{t:02d}.cmt")) for t in range(T)])
        flows = np.stack([load_array(os.path.join(d, f"flow_{t:02d}.cmt")) for t in range(1, T)])
        labels = None
        if with_labels:
            labels = np.stack([load_array(os.path.join(d, f"label_{t:02d}.cmt")) for t in range(T)])
        return ClipSample(frames=frames, labels=labels, flows=flows, domain=domain)

    def check_target_label_access(self, idx):
        if self.role == "audit":
            return
        if self.role == "eval" and idx in self.manifest["eval"] and idx not in self.manifest["forbidden_labels"]:
            return
        raise FirewallError(f"role {self.role!r} may not read labels of target clip {idx}")

    def source_clip(self, idx):
        return self._read("source", idx, True)

    def target_clip(self, idx, with_labels=False):
        if with_labels:
            self.check_target_label_access(idx)
        return self._read("target", idx, with_labels)

    def target_labels(self, idx):
        return self.target_clip(idx, with_labels=True).labels


def _stack(clips, with_labels):
    frames = np.stack([c.frames for c in clips]) if clips else None
    flows = np.stack([c.flows for c in clips]) if clips else None
    labels = np.stack([c.labels for c in clips]) if (clips and with_labels) else None
    return VideoSet(frames=frames, flows=flows, labels=labels)


def load_training_data(root, require_pseudo=False):
    """Source clips with labels, target training clips without, and the
    pseudo-labels when present."""
    reader = DatasetReader(root, role="trainer")
    source = _stack([reader.source_clip(i) for i in reader.source_ids()], True)
    target = _stack([reader.target_clip(j) for j in reader.target_ids("train")], False)
    pseudo = None
    try:
        pseudo = load_pseudo_labels(root, reader.target_ids("train"), reader.num_frames)
    except MissingPseudoLabels:
        if require_pseudo:
            raise
    return TrainingData(
        source=source,
        target=target,
        num_classes=reader.meta["num_classes"],
        categories=reader.meta.get("categories", CATEGORIES),
        pseudo=pseudo,
    )


def load_eval_split(root):
    reader = DatasetReader(root, role="eval")
    return _stack([reader.target_clip(j, with_labels=True) for j in reader.target_ids("eval")], True)


def write_pseudo_labels(root, clip_ids, labels, summary):
    """``labels`` is ``(N, T, H, W)`` aligned with ``clip_ids``."""
    for idx, clip_labels in zip(clip_ids, labels):
        d = _clip_dir(root, "pseudo", idx)
        os.makedirs(d, exist_ok=True)
        for t, lab in enumerate(clip_labels):
            save_array(os.path.join(d, f"plabel_{t:02d}.cmt"), np.asarray(lab, np.uint8))
    with open(os.path.join(root, "pseudo", "summary.txt"), "w") as fh:
        fh.write(summary)


def load_pseudo_labels(root, clip_ids, num_frames):
    out = []
    for idx in clip_ids:
        d = _clip_dir(root, "pseudo", idx)
        paths = [os.path.join(d, f"plabel_{t:02d}.cmt") for t in range(num_frames)]
        missing = [p for p in paths if not os.path.exists(p)]
        if missing:
            raise MissingPseudoLabels(f"missing pseudo-labels: {missing[0]}")
        out.append(np.stack([load_array(p) for p in paths]))
    return np.stack(out) if out else np.zeros((0,), np.uint8)


def synthesize(spec, source_style, target_style, n_source, n_target, n_eval=0, target_spec=None):
    """In-memory counterpart of :func:`synthgen.generate_dataset`.

    Returns ``(training_data, eval_set, target_truth)``; the clip indices and
    pixels match what ``generate_dataset`` writes. ``target_truth`` holds the
    training-split target labels and exists for audits only.
    """
    from .synthgen import generate_clip

    target_spec = spec if target_spec is None else target_spec
    src = [generate_clip(spec, source_style, i, "source") for i in range(n_source)]
    tgt = [generate_clip(target_spec, target_style, n_source + j, "target") for j in range(n_target + n_eval)]
    source = _stack(src, True)
    train = _stack(tgt[:n_target], False)
    truth = np.stack([c.labels for c in tgt[:n_target]]) if n_target else None
    eval_set = _stack(tgt[n_target:], True)
    data = TrainingData(source=source, target=train, num_classes=spec.num_classes, categories=CATEGORIES)
    return data, eval_set, truth
