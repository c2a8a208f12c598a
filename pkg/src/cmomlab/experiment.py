"""One experiment = a world, a dataset size and a training config.

The JSON config mirrors these dataclasses::

    {"world": {...WorldSpec}, "data": {"n_source": 200, ...},
     "train": {...TrainConfig, "mix": {...}, "pseudo": {...}},
     "pretrain_iterations": null}

A single seed drives everything: ``with_seed`` copies it into the world
and the training config.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import dataset, evaluation, pseudo, synthgen, trainer
from .synthgen import WorldSpec
from .trainer import TrainConfig


@dataclass
class DataConfig:
    n_source: int = 200
    n_target: int = 200
    n_eval: int = 50

    def __post_init__(self):
        if min(self.n_source, self.n_target, self.n_eval) < 0:
            raise ValueError("clip counts must be non-negative")


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # None means train.max_iter // 4
    pretrain_iterations: int = None

    def __post_init__(self):
        if isinstance(self.world, dict):
            w = dict(self.world)
            for k in ("scroll_velocity", "object_velocity_range", "rarity_weights", "objects_per_clip"):
                if k in w:
                    w[k] = tuple(w[k])
            self.world = WorldSpec(**w)
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {
            "world": asdict(self.world),
            "data": asdict(self.data),
            "train": self.train.to_dict(),
            "pretrain_iterations": self.pretrain_iterations,
        }

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed):
        return replace(self, world=replace(self.world, seed=int(seed)), train=replace(self.train, seed=int(seed)))

    def with_train(self, **overrides):
        d = self.train.to_dict()
        for k, v in overrides.items():
            if k in ("mix", "pseudo") and isinstance(v, dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return replace(self, train=TrainConfig.from_dict(d))

    @property
    def target_world(self):
        return synthgen.target_world(self.world)


def desk_config(seed=0):
    """The desk-scale benchmark: 64x64, 8 classes, 200 + 200 clips, 2000
    self-training iterations."""
    return ExperimentConfig().with_seed(seed)


def smoke_config(seed=0):
    """A tiny configuration for quick end-to-end checks."""
    cfg = ExperimentConfig(
        world=WorldSpec(height=32, width=32),
        data=DataConfig(n_source=4, n_target=4, n_eval=2),
        train=TrainConfig(max_iter=8),
        pretrain_iterations=8,
    )
    return cfg.with_seed(seed)


@dataclass
class Prepared:
    data: dataset.TrainingData
    eval_set: dataset.VideoSet
    # training-split target labels, for audits only
    target_truth: np.ndarray = field(default=None, repr=False)


def prepare(exp):
    src_style, tgt_style = synthgen.default_styles()
    d = exp.data
    data, eval_set, truth = dataset.synthesize(
        exp.world, src_style, tgt_style, d.n_source, d.n_target, d.n_eval, target_spec=exp.target_world
    )
    return Prepared(data=data, eval_set=eval_set, target_truth=truth)


def write_dataset(exp, root):
    src_style, tgt_style = synthgen.default_styles()
    d = exp.data
    synthgen.generate_dataset(exp.world, src_style, tgt_style, d.n_source, d.n_target, root,
                              n_eval=d.n_eval, target_spec=exp.target_world)


def pretrain(exp, data, log=None):
    return trainer.pretrain_source_only(exp.train, data, iterations=exp.pretrain_iterations, log=log)


def pseudolabel(exp, data, params):
    """Pseudo-label the target training clips. Returns ``(labels, thresholds, kept)``."""
    return pseudo.label_target_set(params, data.target, data.num_classes, exp.train.pseudo)


def score(params, videos, num_classes):
    """``(per-class IoU, mIoU)`` on a labeled video set."""
    return evaluation.iou_scores(evaluation.evaluate(params, videos, num_classes))
