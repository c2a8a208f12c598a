"""Command-line workflow: gen-data, pretrain, pseudolabel, train, eval,
ablate, mix and inspect-bank.

Every subcommand takes ``--config`` (JSON, see ``experiment``), ``--seed``
and ``--workdir``. Outputs land under the work directory::

    data/                  dataset (plus data/pseudo after pseudolabel)
    checkpoints/pretrain   checkpoints/train   checkpoints/train/bank
    logs/                  metrics/            manifest.json

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="experiment JSON (defaults to the desk-scale config)")
    p.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
    p.add_argument("--workdir", default="run", help="output directory (default: ./run)")
    p.add_argument("--json", action="store_true", help="print tables as JSON instead of CSV")


def build_parser():
    parser = _Parser(prog="cmomlab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"cmomlab {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name, help_ in (
        ("gen-data", "write the two-domain dataset"),
        ("pretrain", "source-only pretraining"),
        ("pseudolabel", "pseudo-label the target training clips"),
        ("train", "self-training with mixing and feature alignment"),
        ("eval", "mIoU on the target eval split"),
    ):
        _common(sub.add_parser(name, help=help_))
    p = sub.choices["eval"]
    p.add_argument("--checkpoint", default=None, help="checkpoint directory (default: trained, else pretrained)")
    p = sub.add_parser("ablate", help="run an ablation suite in memory")
    _common(p)
    p.add_argument("--suite", required=True, choices=["loss_flags", "mix_ratio", "mix_contents", "mixer_kind"])
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    p = sub.add_parser("mix", help="mix one source window into one target window")
    _common(p)
    p.add_argument("--dump", action="store_true", help="write the mixed window as tensors")
    p.add_argument("--source-clip", type=int, default=0)
    p.add_argument("--target-clip", type=int, default=0)
    p.add_argument("--t", type=int, default=1, help="current frame of the window")
    p = sub.add_parser("inspect-bank", help="summarize the feature bank saved by train")
    _common(p)
    return parser


def load_config(args):
    from .experiment import ExperimentConfig, desk_config

    exp = ExperimentConfig.load(args.config) if args.config else desk_config()
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    return exp


def _paths(workdir):
    j = lambda *a: os.path.join(workdir, *a)  # noqa: E731
    return dict(
        data=j("data"),
        pretrain=j("checkpoints", "pretrain"),
        train=j("checkpoints", "train"),
        bank=j("checkpoints", "train", "bank"),
        logs=j("logs"),
        metrics=j("metrics"),
        manifest=j("manifest.json"),
    )


def update_manifest(workdir, exp, **entries):
    """Merge ``entries`` (lists of paths under a key) into the run manifest."""
    path = _paths(workdir)["manifest"]
    m = {}
    if os.path.exists(path):
        with open(path) as fh:
            m = json.load(fh)
    m.update(config_hash=exp.digest(), dataset=_paths(workdir)["data"],
             seeds=sorted({exp.world.seed, exp.train.seed}), version=__version__)
    for key, files in entries.items():
        m[key] = sorted(set(m.get(key, [])) | set(files))
    missing = [f for k in ("checkpoints", "logs", "metrics") for f in m.get(k, []) if not os.path.exists(f)]
    if missing:
        raise RuntimeError(f"manifest names missing files: {missing}")
    os.makedirs(workdir, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(m, fh, indent=1, sort_keys=True)


def _emit(rows, header, as_json, out):
    from .evaluation import table_csv, table_json

    out.write(table_json(rows) + "\n" if as_json else table_csv(rows, header))


def cmd_gen_data(args, exp, out):
    from .experiment import write_dataset

    p = _paths(args.workdir)
    if os.path.exists(os.path.join(p["data"], "meta.json")):
        raise RuntimeError(f"dataset already exists at {p['data']}")
    write_dataset(exp, p["data"])
    with open(os.path.join(args.workdir, "config.json"), "w") as fh:
        json.dump(exp.to_dict(), fh, indent=1, sort_keys=True)
    update_manifest(args.workdir, exp)
    d = exp.data
    out.write(f"wrote {d.n_source} source, {d.n_target} target and {d.n_eval} eval clips to {p['data']}\n")


def _log_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in r) + "\n")


def cmd_pretrain(args, exp, out):
    from . import dataset, segmodel
    from .experiment import pretrain

    p = _paths(args.workdir)
    data = dataset.load_training_data(p["data"])
    log = []
    params = pretrain(exp, data, log=log)
    segmodel.save_checkpoint(params, p["pretrain"], len(log))
    os.makedirs(p["logs"], exist_ok=True)
    log_path = os.path.join(p["logs"], "pretrain.csv")
    _log_csv(log_path, ["iteration", "L_source", "lr"], [(it, float(l), float(lr)) for it, l, lr in log])
    update_manifest(args.workdir, exp, checkpoints=[p["pretrain"]], logs=[log_path])
    out.write(f"pretrained {len(log)} iterations -> {p['pretrain']}\n")


def _require_checkpoint(path, hint):
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise FileNotFoundError(f"missing checkpoint {path}: run {hint} first")


def cmd_pseudolabel(args, exp, out):
    from . import dataset, pseudo, segmodel
    from .experiment import pseudolabel
    from .synthgen import CLASS_NAMES

    p = _paths(args.workdir)
    _require_checkpoint(p["pretrain"], "pretrain")
    params, _ = segmodel.load_checkpoint(p["pretrain"])
    data = dataset.load_training_data(p["data"])
    labels, thr, kept = pseudolabel(exp, data, params)
    ids = dataset.DatasetReader(p["data"]).target_ids("train")
    dataset.write_pseudo_labels(p["data"], ids, labels, pseudo.summary_text(thr, labels, CLASS_NAMES))
    out.write(f"pseudo-labeled {len(ids)} clips, kept fraction {kept:.4f}\n")


def cmd_train(args, exp, out):
    from . import dataset, fatc, segmodel, trainer

    p = _paths(args.workdir)
    try:
        data = dataset.load_training_data(p["data"], require_pseudo=True)
    except dataset.MissingPseudoLabels as e:
        raise RuntimeError(f"missing pseudo-labels: run pseudolabel first ({e})") from None
    _require_checkpoint(p["pretrain"], "pretrain")
    init, _ = segmodel.load_checkpoint(p["pretrain"])
    os.makedirs(p["logs"], exist_ok=True)
    log_path = os.path.join(p["logs"], "train.csv")
    timing_path = os.path.join(p["logs"], "train_timing.csv")
    params, reports, state = trainer.run_self_training(
        exp.train, data, init, log_path=log_path, checkpoint_dir=p["train"], timing_path=timing_path
    )
    fatc.save_bank(state.bank, p["bank"])
    update_manifest(args.workdir, exp, checkpoints=[p["train"], p["bank"]], logs=[log_path, timing_path])
    last = reports[-1] if reports else None
    msg = f"trained {len(reports)} iterations -> {p['train']}"
    if last is not None:
        msg += f" (final total loss {last.total:.4f})"
    out.write(msg + "\n")


def cmd_eval(args, exp, out):
    from . import dataset, evaluation, segmodel
    from .synthgen import CLASS_NAMES

    p = _paths(args.workdir)
    ck = args.checkpoint
    if ck is None:
        ck = p["train"] if os.path.exists(os.path.join(p["train"], "manifest.json")) else p["pretrain"]
    _require_checkpoint(ck, "pretrain or train")
    params, _ = segmodel.load_checkpoint(ck)
    eval_set = dataset.load_eval_split(p["data"])
    meta = dataset.load_meta(p["data"])
    iou, miou = evaluation.iou_scores(evaluation.evaluate(params, eval_set, meta["num_classes"]))
    rows = [{"class": CLASS_NAMES[c], "iou": "" if np.isnan(v) else round(float(v), 6)} for c, v in enumerate(iou)]
    rows.append({"class": "mIoU", "iou": round(miou, 6)})
    os.makedirs(p["metrics"], exist_ok=True)
    csv_path = os.path.join(p["metrics"], "eval.csv")
    with open(csv_path, "w") as fh:
        fh.write(evaluation.table_csv(rows, ["class", "iou"]))
    update_manifest(args.workdir, exp, metrics=[csv_path])
    _emit(rows, ["class", "iou"], args.json, out)
    if not args.json:
        out.write(f"mIoU {miou:.4f}\n")


def cmd_ablate(args, exp, out):
    from .evaluation import run_ablation, table_csv

    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    rows, _ = run_ablation(args.suite, exp, seeds)
    header = list(rows[0])
    p = _paths(args.workdir)
    os.makedirs(p["metrics"], exist_ok=True)
    csv_path = os.path.join(p["metrics"], f"ablate_{args.suite}.csv")
    with open(csv_path, "w") as fh:
        fh.write(table_csv(rows, header))
    update_manifest(args.workdir, exp, metrics=[csv_path])
    _emit(rows, header, args.json, out)


def cmd_mix(args, exp, out):
    from . import dataset, mixer
    from .core import IGNORE, save_array

    p = _paths(args.workdir)
    reader = dataset.DatasetReader(p["data"])
    src = reader.source_clip(args.source_clip)
    tid = reader.target_ids("train")[args.target_clip]
    tgt = reader.target_clip(tid)
    t = args.t
    if not 1 <= t < reader.num_frames:
        raise UsageError(f"--t must lie in [1, {reader.num_frames - 1}]")
    try:
        plabel = dataset.load_pseudo_labels(p["data"], [tid], reader.num_frames)[0, t]
    except dataset.MissingPseudoLabels:
        plabel = np.full(src.labels[t].shape, IGNORE, np.uint8)
        out.write("no pseudo-labels found; the target side of the mixed label is IGNORE\n")
    s_w = ((src.frames[t - 1], src.frames[t]), (src.labels[t - 1], src.labels[t]), src.flows[t - 1])
    t_w = ((tgt.frames[t - 1], tgt.frames[t]), None, tgt.flows[t - 1])
    fn = mixer.mix_cmom if exp.train.mixer_kind == "cmom" else mixer.mix_dacs_window
    res = fn(s_w, t_w, plabel, exp.train.mix, exp.train.seed)
    out.write(f"selected classes: {sorted(res.selected_classes)}\n")
    out.write(f"pasted pixels: prev {int(res.masks[0].sum())}, current {int(res.masks[1].sum())}\n")
    if args.dump:
        d = os.path.join(args.workdir, "mix", f"s{args.source_clip:04d}_t{tid:04d}_f{t:02d}")
        os.makedirs(d, exist_ok=True)
        save_array(os.path.join(d, "frame_prev.cmt"), res.mixed_frames[0].astype(np.float32))
        save_array(os.path.join(d, "frame_cur.cmt"), res.mixed_frames[1].astype(np.float32))
        save_array(os.path.join(d, "label.cmt"), np.asarray(res.mixed_label, np.uint8))
        save_array(os.path.join(d, "flow.cmt"), res.mixed_flow.astype(np.float32))
        save_array(os.path.join(d, "mask_prev.cmt"), res.masks[0].astype(np.uint8))
        save_array(os.path.join(d, "mask_cur.cmt"), res.masks[1].astype(np.uint8))
        out.write(f"dumped to {d}\n")


def cmd_inspect_bank(args, exp, out):
    from . import fatc
    from .synthgen import CLASS_NAMES

    p = _paths(args.workdir)
    if not os.path.exists(os.path.join(p["bank"], "manifest.json")):
        raise FileNotFoundError(f"no feature bank at {p['bank']}: run train first")
    bank = fatc.load_bank(p["bank"])
    rows = []
    for c, n in bank.occupancy().items():
        e = bank.entries(c)
        rows.append({"class": CLASS_NAMES[c], "entries": n, "mean_l1_norm": round(float(np.abs(e).sum(1).mean()), 6)})
    _emit(rows, ["class", "entries", "mean_l1_norm"], args.json, out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "pseudolabel": cmd_pseudolabel,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "mix": cmd_mix,
    "inspect-bank": cmd_inspect_bank,
}


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        exp = load_config(args)
        COMMANDS[args.command](args, exp, out)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_USAGE
    except SystemExit as e:
        # --help and --version
        return EXIT_OK if not e.code else EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        sys.stderr.write(f"error: {e}\n")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
