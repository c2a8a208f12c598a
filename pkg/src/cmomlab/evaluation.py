"""Confusion matrices, IoU scores and the ablation harness."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import replace

import numpy as np

from .core import IGNORE
from .segmodel import predict_clip


def empty_confusion(num_classes):
    return np.zeros((num_classes, num_classes), np.int64)


def accumulate(cm, truth, pred):
    """Add ``truth`` / ``pred`` pixel pairs to ``cm`` (rows truth, cols
    prediction). IGNORE truth pixels are skipped. Returns ``cm``."""
    truth = np.asarray(truth).ravel()
    pred = np.asarray(pred).ravel()
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction sizes differ")
    n = cm.shape[0]
    keep = truth != IGNORE
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= n or p.max() >= n or p.min() < 0):
        raise ValueError(f"class id out of range for {n} classes")
    cm += np.bincount(t * n + p, minlength=n * n).reshape(n, n)
    return cm


def iou_scores(cm):
    """Per-class IoU (NaN where undefined) and the mean over defined classes."""
    cm = np.asarray(cm, np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    defined = ~np.isnan(iou)
    miou = float(iou[defined].mean()) if defined.any() else float("nan")
    return iou, miou


def evaluate(params, videos, num_classes):
    """Confusion matrix of fused-logit argmax over every labeled frame."""
    cm = empty_confusion(num_classes)
    for i in range(len(videos)):
        pred = predict_clip(params, videos.frames[i], videos.flows[i]).argmax(axis=1)
        accumulate(cm, videos.labels[i], pred)
    return cm


def rarest_classes(videos, k=2, among=None):
    """The ``k`` classes with the fewest labeled pixels in ``videos``."""
    counts = np.bincount(videos.labels[videos.labels != IGNORE].ravel().astype(np.int64))
    classes = [c for c in range(len(counts)) if counts[c] > 0 and (among is None or c in among)]
    return sorted(sorted(classes, key=lambda c: counts[c])[:k])


def table_csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r.get(h, "") for h in header])
    return buf.getvalue()


def table_json(rows):
    return json.dumps(rows, indent=1, sort_keys=True)


RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
CONTENTS = ("things", "stuffs", "movable", "stationary", "all")
_BOTH = dict(enable_cmom=True, enable_fatc=True)

# cell name -> TrainConfig overrides; None means "evaluate the pretrained model"
SUITES = {
    "loss_flags": {
        "baseline": None,
        "self_training": dict(enable_cmom=False, enable_fatc=False),
        "cmom": dict(enable_cmom=True, enable_fatc=False),
        "fatc": dict(enable_cmom=False, enable_fatc=True),
        "cmom_fatc": dict(_BOTH),
    },
    "mix_ratio": {f"ratio_{r:g}": dict(_BOTH, mix={"class_ratio": r}) for r in RATIOS},
    "mix_contents": {c: dict(_BOTH, mix={"class_filter": c}) for c in CONTENTS},
    "mixer_kind": {k: dict(_BOTH, mixer_kind=k) for k in ("cmom", "dacs")},
}


def mixing_violation_rate(data, cfg, kind, n_windows=100):
    """Mean flow-violation rate of mixed label pairs.

    Window ``w`` pairs source clip ``w`` with target clip ``w`` (both taken
    modulo the split sizes) at ``t = 1``. The target side uses the
    pseudo-labels, so no target ground truth is read.
    """
    from . import flowops, mixer

    mix_fn = mixer.mix_cmom if kind == "cmom" else mixer.mix_dacs_window
    rates = []
    for w in range(n_windows):
        i, j = w % len(data.source), w % len(data.target)
        s, t = data.source, data.target
        src = ((s.frames[i, 0], s.frames[i, 1]), (s.labels[i, 0], s.labels[i, 1]), s.flows[i, 0])
        tgt = ((t.frames[j, 0], t.frames[j, 1]), None, t.flows[j, 0])
        res = mix_fn(src, tgt, data.pseudo[j, 1], cfg.mix, w)
        pair = mixer.mixed_label_pair(res, src[1], (data.pseudo[j, 0], data.pseudo[j, 1]))
        rates.append(flowops.flow_violation_rate(*pair, res.mixed_flow))
    return float(np.mean(rates))


def step_overhead(cfg, data, params, n_steps=200, warmup=10):
    """Mean ``train_step`` time with and without mixing.

    Two trainer states start from ``params`` and take alternating steps on
    the same seeded windows (which goes first flips every step), so
    machine-load drift hits both equally. The feature term is off in both.
    Returns ``(with_mix, without)`` in seconds.
    """
    from . import trainer

    on = replace(cfg, enable_cmom=True, enable_fatc=False, max_iter=n_steps + warmup)
    off = replace(on, enable_cmom=False)
    states = [trainer.new_state(trainer._cast(params, on), on) for _ in range(2)]
    rngs = [np.random.default_rng([cfg.seed, 303]) for _ in range(2)]
    warps = trainer._WarpCache(data.source.flows)
    order = np.random.default_rng([cfg.seed, 404])
    times = ([], [])
    T = data.source.frames.shape[1]
    for it in range(n_steps + warmup):
        i, j = int(order.integers(len(data.source))), int(order.integers(len(data.target)))
        t = int(order.integers(1, T))
        src_w = trainer._window(data.source, i, t)
        tgt_w = trainer._window(data.target, j, t, with_labels=False)
        for k in ((0, 1) if it % 2 == 0 else (1, 0)):
            c = (on, off)[k]
            rep = trainer.train_step(states[k], c, src_w, tgt_w, data.pseudo[j, t], rngs[k],
                                     categories=data.categories, source_warp=warps.get(i, t))
            if it >= warmup:
                times[k].append(rep.step_time)
    return float(np.mean(times[0])), float(np.mean(times[1]))


def run_grid(exp, seeds, cells, violation_windows=0, progress=None):
    """Run every cell for every seed. Per seed the data, the pretrained model
    and the pseudo-labels are built once and shared by all cells.

    Returns one record per (cell, seed) with ``miou``, ``iou``, the final
    ``params`` and the step reports of the run (empty for the pretrained
    baseline).
    """
    from . import experiment, trainer

    records = []
    for seed in seeds:
        ex = exp.with_seed(seed)
        prep = experiment.prepare(ex)
        p0 = experiment.pretrain(ex, prep.data)
        prep.data.pseudo, _, _ = experiment.pseudolabel(ex, prep.data, p0)
        for name, overrides in cells.items():
            if overrides is None:
                params, reports, cfg = p0, [], ex.train
            else:
                cfg = ex.with_train(**overrides).train
                params, reports, _ = trainer.run_self_training(cfg, prep.data, p0)
            iou, miou = experiment.score(params, prep.eval_set, prep.data.num_classes)
            rec = dict(cell=name, seed=seed, miou=miou, iou=iou, params=params, reports=reports)
            if violation_windows:
                rec["violation_rate"] = mixing_violation_rate(prep.data, cfg, cfg.mixer_kind, violation_windows)
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


def summarize(records, class_names=None):
    """Mean and sample standard deviation of mIoU per cell, in first-seen
    cell order, plus per-class mean IoU."""
    order = list(dict.fromkeys(r["cell"] for r in records))
    rows = []
    for cell in order:
        rs = [r for r in records if r["cell"] == cell]
        m = np.array([r["miou"] for r in rs])
        row = {
            "cell": cell,
            "seeds": len(rs),
            "miou_mean": round(float(m.mean()), 6),
            "miou_sd": round(float(m.std(ddof=1)) if len(m) > 1 else 0.0, 6),
        }
        with warnings.catch_warnings():
            # a class absent from every seed's eval split stays NaN
            warnings.simplefilter("ignore", RuntimeWarning)
            per_class = np.nanmean(np.stack([r["iou"] for r in rs]), axis=0)
        for c, v in enumerate(per_class):
            key = f"iou_{class_names[c]}" if class_names else f"iou_{c}"
            row[key] = "" if np.isnan(v) else round(float(v), 6)
        if "violation_rate" in rs[0]:
            row["violation_rate"] = round(float(np.mean([r["violation_rate"] for r in rs])), 6)
        rows.append(row)
    return rows


def run_ablation(suite, exp, seeds, violation_windows=100, progress=None):
    """Run one ablation suite and return ``(summary_rows, records)``."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    vw = violation_windows if suite == "mixer_kind" else 0
    records = run_grid(exp, seeds, SUITES[suite], violation_windows=vw, progress=progress)
    from .synthgen import CLASS_NAMES

    return summarize(records, CLASS_NAMES), records
