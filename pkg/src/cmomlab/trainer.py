"""Source-only pretraining and the mixed-domain self-training loop."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import fatc, flowops, mixer, segmodel
from .core import IGNORE
from .mixer import MixConfig
from .pseudo import PseudoPolicyConfig
from .synthgen import CATEGORIES

MIXER_KINDS = ("cmom", "dacs")


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    max_iter: int = 2000
    lambda_m: float = 1.0
    lambda_feature: float = 0.01
    mix: MixConfig = field(default_factory=MixConfig)
    pseudo: PseudoPolicyConfig = field(default_factory=PseudoPolicyConfig)
    bank_capacity: int = 50
    seed: int = 0
    enable_cmom: bool = True
    enable_fatc: bool = True
    mixer_kind: str = "cmom"
    fatc_class_reduction: str = "sum"
    # learning rate of the source-only stage from random init; None reuses lr0
    pretrain_lr0: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.mix, dict):
            self.mix = MixConfig(**self.mix)
        if isinstance(self.pseudo, dict):
            self.pseudo = PseudoPolicyConfig(**self.pseudo)
        if self.lambda_m < 0 or self.lambda_feature < 0:
            raise ValueError("loss weights must be non-negative")
        if self.max_iter <= 0:
            raise ValueError("max_iter must be positive")
        if self.mixer_kind not in MIXER_KINDS:
            raise ValueError(f"mixer_kind must be one of {MIXER_KINDS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepReport:
    iteration: int
    L_source: float
    L_self: float
    L_feature: float
    total: float
    lr: float
    kept_fraction: float
    t_mix: float = 0.0
    t_forward: float = 0.0
    t_backward: float = 0.0
    t_fatc: float = 0.0

    @property
    def step_time(self):
        return self.t_mix + self.t_forward + self.t_backward + self.t_fatc


REPORT_FIELDS = [f.name for f in fields(StepReport)]
# wall-clock columns live in a separate file so the loss log is reproducible
TIMING_FIELDS = ["iteration", "t_mix", "t_forward", "t_backward", "t_fatc"]
LOG_FIELDS = [k for k in REPORT_FIELDS if k not in TIMING_FIELDS[1:]]


def total_loss(l_source, l_self, l_feature, cfg):
    return l_source + cfg.lambda_m * l_self + cfg.lambda_feature * l_feature


@dataclass
class TrainerState:
    params: dict
    opt_state: dict
    bank: fatc.FeatureBank
    iteration: int = 0


def new_state(params, cfg):
    dim = params["cls_w"].shape[1]
    return TrainerState(params=params, opt_state={}, bank=fatc.FeatureBank(dim, cfg.bank_capacity))


def _category(c, categories):
    return "stuff" if c in categories["stuff"] else "thing"


def _add(acc, grads):
    for k, v in grads.items():
        acc[k] = acc[k] + v if k in acc else v
    return acc


def source_centroids(trace, truth, categories):
    """Centroids of correctly predicted source regions, per instance."""
    pred = trace.fused.argmax(axis=0)
    out = []
    for c in np.unique(truth):
        if c == IGNORE:
            continue
        c = int(c)
        v = fatc.source_valid_mask(pred, truth, c)
        inst = flowops.split_instances(v, c, _category(c, categories))
        out.extend(fatc.compute_centroids(trace.features_t, inst, c))
    return out


def mixed_centroids(params, trace, flow, categories):
    """Centroids of temporally consistent mixed-domain predictions."""
    pred_t = trace.fused.argmax(axis=0)
    warped_prev = flowops.warp_labels(segmodel.fused_previous(params, trace).argmax(axis=0), flow)
    out = []
    for c in np.unique(pred_t):
        c = int(c)
        v = flowops.consensus_mask(pred_t, warped_prev, c)
        inst = flowops.split_instances(v, c, _category(c, categories))
        out.extend(fatc.compute_centroids(trace.features_t, inst, c))
    return out


def make_mixed_window(cfg, source_window, target_window, pseudo_label, rng):
    """Mixed frames, label and flow for one iteration (or the plain target
    window when mixing is off)."""
    if not cfg.enable_cmom:
        return target_window[0], pseudo_label, target_window[2]
    if cfg.mixer_kind == "cmom":
        res = mixer.mix_cmom(source_window, target_window, pseudo_label, cfg.mix, rng)
    else:
        res = mixer.mix_dacs_window(source_window, target_window, pseudo_label, cfg.mix, rng)
    return res.mixed_frames, res.mixed_label, res.mixed_flow


def train_step(state, cfg, source_window, target_window, pseudo_label, rng,
               categories=CATEGORIES, source_warp=None, apply_feature_grad=True):
    """One optimization step on a source window and a target window.

    Windows are ``(frames_pair, labels_pair_or_None, flow)``. ``rng`` drives
    the class selection of the mix.
    """
    t0 = time.perf_counter()
    mixed_frames, mixed_label, mixed_flow = make_mixed_window(cfg, source_window, target_window, pseudo_label, rng)
    t1 = time.perf_counter()

    params = state.params
    src_frames, (ys_prev, ys_t), src_flow = source_window
    tr_s = segmodel.forward(params, src_frames, src_flow, warp=source_warp)
    tr_m = segmodel.forward(params, mixed_frames, mixed_flow)
    l_source, g_source = segmodel.cross_entropy_loss(tr_s.fused, ys_t)
    l_self, g_self = segmodel.cross_entropy_loss(tr_m.fused, mixed_label)
    t2 = time.perf_counter()

    l_feature = 0.0
    g_feat = None
    if cfg.enable_fatc:
        for cen in source_centroids(tr_s, ys_t, categories):
            state.bank.push(cen)
        cents = mixed_centroids(params, tr_m, mixed_flow, categories)
        l_feature, cgrads = fatc.feature_alignment_loss(cents, state.bank, cfg.fatc_class_reduction)
        if apply_feature_grad and cents:
            g_feat = fatc.centroid_feature_gradient(cents, cgrads, tr_m.features_t.shape)
            g_feat = (cfg.lambda_feature * g_feat).astype(tr_m.features.dtype)
    t3 = time.perf_counter()

    dt = tr_m.fused.dtype
    grads = segmodel.backward(params, tr_s, g_source)
    grads = _add(grads, segmodel.backward(params, tr_m, (cfg.lambda_m * g_self).astype(dt), g_feat))
    lr = segmodel.sgd_step(params, grads, state.opt_state, state.iteration, cfg)
    t4 = time.perf_counter()

    kept = float(np.mean(np.asarray(mixed_label) != IGNORE))
    report = StepReport(
        iteration=state.iteration,
        L_source=l_source,
        L_self=l_self,
        L_feature=l_feature,
        total=total_loss(l_source, l_self, l_feature, cfg),
        lr=lr,
        kept_fraction=kept,
        t_mix=t1 - t0,
        t_forward=t2 - t1,
        t_backward=t4 - t3,
        t_fatc=t3 - t2,
    )
    state.iteration += 1
    return report


def _window(videos, i, t, with_labels=True):
    frames = (videos.frames[i, t - 1], videos.frames[i, t])
    labels = (videos.labels[i, t - 1], videos.labels[i, t]) if with_labels else None
    return frames, labels, videos.flows[i, t - 1]


class _WarpCache:
    """Bilinear warp operators of fixed (source) flows, built on demand."""

    def __init__(self, flows):
        self.flows = flows
        self.ops = {}

    def get(self, i, t):
        key = (i, t)
        if key not in self.ops:
            self.ops[key] = flowops.WarpOperator(self.flows[i, t - 1], "bilinear")
        return self.ops[key]


def _cast(params, cfg):
    dt = np.dtype(cfg.dtype)
    return {k: np.array(v, dtype=dt) for k, v in params.items()}


def pretrain_source_only(cfg, data, init=None, iterations=None, log=None):
    """Train on source windows with the source loss only.

    Runs ``cfg.max_iter // 4`` iterations unless ``iterations`` is given.
    """
    n_src = 0 if data.source.frames is None else len(data.source)
    if n_src == 0:
        raise ValueError("pretraining needs at least one source clip")
    iterations = cfg.max_iter // 4 if iterations is None else iterations
    params = segmodel.init_params(data.num_classes, cfg.seed) if init is None else init
    params = _cast(params, cfg)
    if iterations == 0:
        return params
    T = data.source.frames.shape[1]
    rng = np.random.default_rng([cfg.seed, 101])
    order = _epoch_order(rng, n_src, iterations)
    warps = _WarpCache(data.source.flows)
    opt = {}
    lr_cfg = _LrView(cfg, iterations, cfg.pretrain_lr0 if cfg.pretrain_lr0 is not None else cfg.lr0)
    for it in range(iterations):
        i = int(order[it])
        t = int(rng.integers(1, T))
        frames, (_, y_t), flow = _window(data.source, i, t)
        tr = segmodel.forward(params, frames, flow, warp=warps.get(i, t))
        loss, g = segmodel.cross_entropy_loss(tr.fused, y_t)
        grads = segmodel.backward(params, tr, g)
        lr = segmodel.sgd_step(params, grads, opt, it, lr_cfg)
        if log is not None:
            log.append((it, loss, lr))
    return params


@dataclass
class _LrView:
    base: TrainConfig
    max_iter: int
    lr0: float

    def __getattr__(self, name):
        return getattr(self.base, name)


def _epoch_order(rng, n, iterations):
    reps = -(-iterations // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:iterations]


def run_self_training(cfg, data, init, log_path=None, checkpoint_dir=None, iterations=None,
                      timing_path=None):
    """Self-train from ``init`` on source + (mixed) target windows.

    Returns ``(params, reports, state)``; ``state.bank`` holds the final
    feature bank.
    """
    if data.pseudo is None:
        raise FileNotFoundError("missing pseudo-labels: run pseudo-label generation first")
    iterations = cfg.max_iter if iterations is None else iterations
    params = _cast(init, cfg)
    state = new_state(params, cfg)
    n_src, n_tgt = len(data.source), len(data.target)
    T = data.source.frames.shape[1]
    rng = np.random.default_rng([cfg.seed, 202])
    src_order = _epoch_order(rng, n_src, iterations)
    tgt_order = _epoch_order(rng, n_tgt, iterations)
    mix_rng = np.random.default_rng([cfg.seed, 303])
    warps = _WarpCache(data.source.flows)
    reports = []
    for it in range(iterations):
        i, j = int(src_order[it]), int(tgt_order[it])
        t = int(rng.integers(1, T))
        src_w = _window(data.source, i, t)
        tgt_w = _window(data.target, j, t, with_labels=False)
        rep = train_step(state, cfg, src_w, tgt_w, data.pseudo[j, t], mix_rng,
                         categories=data.categories, source_warp=warps.get(i, t))
        reports.append(rep)
    if log_path is not None:
        write_log(log_path, reports)
    if timing_path is not None:
        write_log(timing_path, reports, TIMING_FIELDS)
    if checkpoint_dir is not None:
        segmodel.save_checkpoint(state.params, checkpoint_dir, state.iteration)
    return state.params, reports, state


def write_log(path, reports, columns=LOG_FIELDS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in reports:
            w.writerow([getattr(r, k) for k in columns])


def config_from_json(path):
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))
