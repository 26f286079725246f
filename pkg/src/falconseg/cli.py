"""Command-line workflows: synthesize data, train, fine-tune, infer, evaluate.

Subcommands
    synth       write a synthetic source or target tree
    train       episodic meta-training on a source tree
    finetune    adversarial fine-tuning on a target tree
    infer       gradient-free inference over a tree's patients
    eval        metric report over a tree's ground-truth slices
    eval-masks  score one prediction raster against one reference raster
    ablate      loss/architecture ablation suite on the synthetic benchmark
    report      render figures from run artifacts

Config precedence is defaults < --config file < -o overrides, with --seed
acting as a final override.  FALCON_SEED replaces only the default seed;
a seed from the file or an override still wins.  Every config-resolving
subcommand writes resolved_config.json next to its outputs.

Exit codes: 0 ok, 2 usage, 3 data error, 4 config error, 5 runtime error.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np
from PIL import Image

from falconseg import config as config_mod
from falconseg import data_io, figures, training
from falconseg.episodes import build_inference_task
from falconseg.errors import (
    ConfigError,
    DataError,
    MissingFileError,
    ShapeMismatchError,
)
from falconseg.inference_eval import (
    TaskMetrics,
    evaluate_tasks,
    infer_patient,
    run_ablation_suite,
    score_slice,
    scored_inference_task,
    sealed_masks_of,
)


def _fraction(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in (0, 1), got {text}")
    return v


def _seed_list(text):
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"seeds must be comma-separated integers, got {text!r}"
        )


def _resolve_cfg(args):
    d = {}
    path = getattr(args, "config", None)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    env = os.environ.get("FALCON_SEED")
    if env is not None and "seed" not in d:
        try:
            d["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"FALCON_SEED must be an integer, got {env!r}")
    cfg = config_mod.from_dict(d)
    overrides = list(getattr(args, "override", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return config_mod.apply_overrides(cfg, overrides)


def _prepare_out(args):
    cfg = _resolve_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_resolved(cfg, os.path.join(args.out, "resolved_config.json"))
    return cfg, args.out


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    cfg, out = _prepare_out(args)
    if args.domain == "source":
        ds = data_io.synth_source(args.classes, args.samples,
                                  size=args.size, seed=cfg.seed)
        data_io.export_source(ds, out, name=args.name or "synth_source")
        n = sum(len(v) for v in ds.samples.values())
        print(f"wrote {len(ds.classes)} classes, {n} samples to {out}")
    else:
        vols = data_io.synth_patients(
            args.patients, args.slices, labeled_fraction=args.fraction,
            size=args.size, seed=cfg.seed, split=args.split,
        )
        data_io.export_patients(vols, out, name=args.name or f"synth_{args.split}")
        print(f"wrote {len(vols)} patients x {args.slices} slices to {out}")
    return 0


def cmd_train(args):
    cfg, out = _prepare_out(args)
    source = data_io.read_source(args.source)
    state = None
    if args.resume:
        state = training.load_checkpoint(args.resume, expected_network=cfg.network)
        training.adopt_config(state, cfg)
    state = training.meta_train(source, cfg, state)
    ck = os.path.join(out, "checkpoint.npz")
    training.save_checkpoint(state, ck)
    training.write_log(state, os.path.join(out, "log.jsonl"))
    print(f"meta-trained to episode {state.episode}; checkpoint at {ck}")
    return 0


def cmd_finetune(args):
    cfg, out = _prepare_out(args)
    vols, _ = data_io.ingest_patients(args.data)
    val = None
    if args.val:
        val, _ = data_io.ingest_patients(args.val)
    state = training.load_checkpoint(args.checkpoint, expected_network=cfg.network)
    training.adopt_config(state, cfg)
    training.baaf_finetune(vols, state, val_patients=val)
    ck = os.path.join(out, "checkpoint.npz")
    training.save_checkpoint(state, ck)
    training.write_log(state, os.path.join(out, "log.jsonl"))
    tail = f"; best epoch {state.best_epoch}" if state.best_epoch >= 0 else ""
    print(f"fine-tuned {len(vols)} patients over {state.epoch} epochs{tail}; "
          f"checkpoint at {ck}")
    return 0


def _load_model(args):
    """Checkpoint plus the config driving inference.

    Without explicit config inputs the checkpoint's own config is used; with
    them, the checkpoint must match the requested network section.
    """
    explicit = bool(getattr(args, "config", None) or getattr(args, "override", None)
                    or getattr(args, "seed", None) is not None)
    expected = _resolve_cfg(args).network if explicit else None
    state = training.load_checkpoint(args.checkpoint, expected_network=expected)
    cfg = _resolve_cfg(args) if explicit else state.run_cfg
    return state, cfg


def cmd_infer(args):
    state, cfg = _load_model(args)
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_resolved(cfg, os.path.join(args.out, "resolved_config.json"))
    vols, _ = data_io.ingest_patients(args.data)
    chosen = [v for v in vols if args.patient in (None, v.patient_id)]
    if not chosen:
        raise DataError(f"patient {args.patient!r} not found in {args.data}")
    for vol in chosen:
        task = build_inference_task(vol, cfg.network.support_k)
        res = infer_patient(state, task, cfg)
        pdir = os.path.join(args.out, "predictions", vol.patient_id)
        os.makedirs(pdir, exist_ok=True)
        for idx, mask in zip(task.query_indices, res.masks):
            Image.fromarray((mask * 255).astype(np.uint8), "L").save(
                os.path.join(pdir, f"{idx:04d}.png")
            )
        meta = {
            "patient_id": vol.patient_id,
            "support_indices": res.support_indices,
            "threshold": res.threshold,
            "n_slices": len(res.masks),
        }
        with open(os.path.join(pdir, "result.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"{vol.patient_id}: {len(res.masks)} slices -> {pdir}")
    return 0


def cmd_eval(args):
    state, cfg = _load_model(args)
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_resolved(cfg, os.path.join(args.out, "resolved_config.json"))
    vols, _ = data_io.ingest_patients(args.data)
    chosen = [v for v in vols if args.split in ("all", v.split)]
    if not chosen:
        raise DataError(f"no patients with split {args.split!r} in {args.data}")
    sealed = sealed_masks_of(chosen)
    tasks = [scored_inference_task(v, cfg.network.support_k, sealed)
             for v in chosen]
    rep = evaluate_tasks(state, tasks, sealed, cfg, aggregate=args.aggregate)
    rep.write_csv(os.path.join(args.out, "report.csv"))
    with open(os.path.join(args.out, "summary.txt"), "w") as f:
        f.write(rep.summary_text())
    print(rep.summary_text(), end="")
    return 0


def _native_target(path):
    if not os.path.exists(path):
        raise MissingFileError(f"missing file: {path}")
    with Image.open(path) as im:
        return (im.size[1], im.size[0])


def cmd_eval_masks(args):
    pred = data_io.load_mask(args.pred, _native_target(args.pred))
    gt = data_io.load_mask(args.gt, _native_target(args.gt))
    if pred.shape != gt.shape:
        raise ShapeMismatchError(
            f"prediction {pred.shape} vs ground truth {gt.shape}"
        )
    d, sym, h_pg, h_gp, flag = score_slice(pred, gt, hd95_mode=args.hd95_mode)
    print(f"dsc: {d:.6f}")
    print(f"hd95_symmetric: {sym:.6f}")
    print(f"hd95_pred_to_gt: {h_pg:.6f}")
    print(f"hd95_gt_to_pred: {h_gp:.6f}")
    if flag:
        print(f"flag: {flag}")
    return 0


def cmd_ablate(args):
    cfg, out = _prepare_out(args)
    table = run_ablation_suite(cfg, seeds=args.seeds)
    with open(os.path.join(out, "ablation.csv"), "w") as f:
        f.write(table.to_csv_text())
    with open(os.path.join(out, "ablation.txt"), "w") as f:
        f.write(table.to_text())
    print(table.to_text(), end="")
    return 0


def _read_metrics_csv(path):
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(TaskMetrics(
                patient_id=rec["patient_id"],
                n_slices=int(rec["n_slices"]),
                dsc_mean=float(rec["dsc_mean"]),
                hd95_mean=float(rec["hd95_mean"]),
                hd95_pred_to_gt=float(rec["hd95_pred_to_gt"]),
                hd95_gt_to_pred=float(rec["hd95_gt_to_pred"]),
                empty_pred_slices=int(rec["empty_pred_slices"]),
                empty_gt_slices=int(rec["empty_gt_slices"]),
                both_empty_slices=int(rec["both_empty_slices"]),
            ))
    return rows


def _overlay_figures(args, out):
    vols, _ = data_io.ingest_patients(args.data)
    by_id = {v.patient_id: v for v in vols}
    pids = sorted(os.listdir(args.pred)) if os.path.isdir(args.pred) else []
    if args.patient:
        pids = [p for p in pids if p == args.patient]
    made = []
    for pid in pids:
        vol = by_id.get(pid)
        if vol is None:
            continue
        pdir = os.path.join(args.pred, pid)
        names = sorted(n for n in os.listdir(pdir) if n.endswith(".png"))
        names = names[: args.max_tiles]
        if not names:
            continue
        target = vol.slices[0].shape[:2]
        idxs = [int(os.path.splitext(n)[0]) for n in names]
        preds = [data_io.load_mask(os.path.join(pdir, n), target) for n in names]
        images = [vol.slices[i] for i in idxs]
        gts = [vol.masks.get(i) for i in idxs]
        made.append(figures.save_overlay_grid(
            images, preds, gts, os.path.join(out, f"overlay_{pid}.png"),
            titles=[f"slice {i}" for i in idxs],
        ))
    return made


def cmd_report(args):
    os.makedirs(args.out, exist_ok=True)
    made = []
    log = args.log or (os.path.join(args.run, "log.jsonl") if args.run else None)
    if log and os.path.exists(log):
        with open(log) as f:
            hist = [json.loads(line) for line in f if line.strip()]
        made.append(figures.plot_loss_curves(
            hist, os.path.join(args.out, "loss_curves.png")))
    metrics = args.metrics or (
        os.path.join(args.run, "report.csv") if args.run else None)
    if metrics and os.path.exists(metrics):
        made.append(figures.plot_task_bars(
            _read_metrics_csv(metrics), os.path.join(args.out, "task_bars.png")))
    if args.pred and args.data:
        made.extend(_overlay_figures(args, args.out))
    if not made:
        print("nothing to render: no log, metrics, or predictions found",
              file=sys.stderr)
        return 2
    for p in made:
        print(f"wrote {p}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    cfg_parent = argparse.ArgumentParser(add_help=False)
    cfg_parent.add_argument("--config", metavar="JSON",
                            help="config file merged over defaults")
    cfg_parent.add_argument("-o", "--override", action="append",
                            metavar="SEC.KEY=VAL",
                            help="dotted config override, repeatable")
    cfg_parent.add_argument("--seed", type=int, help="seed override")

    p = argparse.ArgumentParser(
        prog="falconseg",
        description="few-shot segmentation workflows on slice-stack trees",
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", parents=[cfg_parent],
                       help="write a synthetic source or target tree")
    s.add_argument("--domain", choices=("source", "target"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=32, help="square slice size")
    s.add_argument("--name", help="dataset name recorded in the manifest")
    s.add_argument("--classes", type=int, default=10, help="source classes")
    s.add_argument("--samples", type=int, default=10,
                   help="source samples per class")
    s.add_argument("--patients", type=int, default=8, help="target patients")
    s.add_argument("--slices", type=int, default=16,
                   help="target slices per patient")
    s.add_argument("--fraction", type=_fraction, default=0.4,
                   help="target labeled fraction, in (0, 1)")
    s.add_argument("--split", choices=("train", "val", "test"),
                   default="train", help="split recorded for target patients")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[cfg_parent],
                       help="episodic meta-training on a source tree")
    s.add_argument("--source", required=True, help="source tree root")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", parents=[cfg_parent],
                       help="adversarial fine-tuning on a target tree")
    s.add_argument("--data", required=True, help="target tree root")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--val", help="validation tree for early stopping")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("infer", parents=[cfg_parent],
                       help="gradient-free inference over a tree's patients")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--patient", help="restrict to one patient id")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[cfg_parent],
                       help="metric report over a tree's ground-truth slices")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "val", "test", "all"),
                   default="test")
    s.add_argument("--aggregate", choices=("task_mean", "pooled"),
                   default="task_mean")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("eval-masks",
                       help="score one prediction raster against a reference")
    s.add_argument("pred", help="predicted mask raster")
    s.add_argument("gt", help="reference mask raster")
    s.add_argument("--hd95-mode", choices=("max", "mean"), default="max")
    s.set_defaults(func=cmd_eval_masks)

    s = sub.add_parser("ablate", parents=[cfg_parent],
                       help="ablation suite on the synthetic benchmark")
    s.add_argument("--seeds", type=_seed_list, default=(0, 1, 2, 3, 4),
                   help="comma-separated seeds")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="render figures from run artifacts")
    s.add_argument("--run", help="run directory searched for log/report files")
    s.add_argument("--log", help="training log (jsonl) for loss curves")
    s.add_argument("--metrics", help="metrics CSV for per-task bars")
    s.add_argument("--pred", help="predictions directory for overlays")
    s.add_argument("--data", help="data tree matching --pred")
    s.add_argument("--patient", help="restrict overlays to one patient id")
    s.add_argument("--max-tiles", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.func(args)
    except (DataError, ShapeMismatchError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 4
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
