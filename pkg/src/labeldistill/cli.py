"""Command-line entry points: gen, train, eval, inspect, compare.

Configuration is one JSON document plus ``--section.field value`` overrides
(flags win). Exit codes: 0 success, 1 usage error, 2 runtime failure.
The output root can be redirected with the LABELDISTILL_OUT_ROOT variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import figures
from .config import ConfigError, load_config, write_resolved
from .data import DatasetError, generate_dataset, load_annotations
from .evaluate import (compare_runs, detect_scenes, evaluate_detections,
                       format_comparison, pr_points)
from .params import ParameterStore
from .detector import init_student
from .serialize import load_tensors, save_tensors
from .train import (Model, ScenePack, load_full_checkpoint, load_student_checkpoint,
                    run_training, scene_diagnostics)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _split_overrides(extra):
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for --{key}")
            val = extra[i + 1]
            i += 2
        pairs.append((key, val))
    return pairs


def _rooted(path):
    root = os.environ.get("LABELDISTILL_OUT_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _comma_list(raw):
    return [p for p in raw.split(",") if p]


def cmd_gen(args, overrides):
    cfg = load_config(args.config, overrides)
    out = _rooted(args.out)
    if os.path.exists(out) and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    generate_dataset(out, args.seed, args.count, cfg.gen)
    write_resolved(cfg, out + ".config_resolved.json")
    print(f"wrote {args.count} scenes to {out}")
    return 0


def cmd_train(args, overrides):
    cfg = load_config(args.config, overrides)
    out_dir = _rooted(args.out)
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, os.path.join(out_dir, "config_resolved.json"))
    refs = load_annotations(args.data)
    model = Model(cfg.detector, cfg.trainer, cfg.mode, cfg.seed)
    final, reports = run_training(model, refs, out_dir, cfg.seed, log=print)
    figures.plot_loss_curves([r.to_dict() for r in reports],
                             os.path.join(out_dir, "loss_curves.png"))
    print(f"final checkpoint: {final}")
    print(f"student-only export: {os.path.join(out_dir, 'student_only_final.bin')}")
    return 0


def cmd_eval(args, overrides):
    cfg = load_config(args.config, overrides)
    out_dir = _rooted(args.out or os.path.dirname(os.path.abspath(args.ckpt)))
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, os.path.join(out_dir, "eval_config_resolved.json"))
    refs = load_annotations(args.data)
    scenes = [r.load() for r in refs]

    store = ParameterStore()
    init_student(store, np.random.default_rng(0), cfg.detector)
    load_student_checkpoint(store, args.ckpt)
    dets = detect_scenes(store, cfg.detector, scenes,
                         cfg.eval.score_thresh, cfg.eval.nms_iou)
    gts = [[(np.asarray(a.box), a.category) for a in s.annotations] for s in scenes]
    result = evaluate_detections(dets, gts, cfg.detector.num_classes)

    with open(os.path.join(out_dir, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "eval_per_class.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "ap50", "ap"])
        for c in range(cfg.detector.num_classes):
            writer.writerow([c, result.per_class_ap50[c], result.per_class_ap[c]])
    figures.plot_pr_curve(pr_points(dets, gts, 0.5, cfg.detector.num_classes),
                          os.path.join(out_dir, "pr_curve_iou50.png"))
    print(f"AP50 {result.ap50:.4f}  AP {result.ap:.4f}  "
          f"({result.num_detections} detections / {result.num_gts} ground truths)")
    return 0


def cmd_inspect(args, overrides):
    arrays = load_tensors(args.ckpt)
    has_lgd = any(n.startswith("lgd.") for n in arrays)
    cfg_path = args.config
    if cfg_path is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(args.ckpt)),
                               "config_resolved.json")
        cfg_path = sibling if os.path.exists(sibling) else None
    cfg = load_config(cfg_path, overrides)
    if cfg_path is None and not overrides:
        cfg.mode = "lgd" if has_lgd else "baseline"
        cfg.resolve()
    if cfg.mode == "lgd" and not has_lgd:
        cfg.mode = "baseline"

    refs = load_annotations(args.data)
    ref = None
    if args.scene_id:
        matches = [r for r in refs if r.id == args.scene_id]
        if not matches:
            raise UsageError(f"scene id {args.scene_id!r} not found in {args.data}")
        ref = matches[0]
    else:
        ref = refs[0]

    model = Model(cfg.detector, cfg.trainer, cfg.mode, cfg.seed)
    if cfg.mode == "lgd":
        load_full_checkpoint(model, args.ckpt)
    else:
        load_student_checkpoint(model.store, args.ckpt)

    out_dir = _rooted(args.out)
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, os.path.join(out_dir, "inspect_config_resolved.json"))
    pack = ScenePack(ref.load(), cfg.detector)
    diag = scene_diagnostics(model, pack)
    dump = os.path.join(out_dir, f"inspect_{ref.id}.bin")
    save_tensors(dump, diag)

    feature_maps = {n: a for n, a in diag.items()
                    if a.ndim == 3 and not n.startswith(("masks.", "attention."))}
    figures.plot_feature_grids(feature_maps,
                               os.path.join(out_dir, f"inspect_{ref.id}_maps.png"),
                               suptitle=f"scene {ref.id}")
    attn = {lvl + 1: diag[f"attention.p{lvl + 1}"]
            for lvl in range(cfg.detector.num_levels)
            if f"attention.p{lvl + 1}" in diag}
    if attn:
        figures.plot_attention_grids(
            attn, os.path.join(out_dir, f"inspect_{ref.id}_attention.png"))
    print(f"wrote {dump}")
    return 0


def cmd_compare(args, overrides):
    cfg = load_config(args.config, overrides)
    baseline = _comma_list(args.baseline)
    lgd = _comma_list(args.lgd)
    seeds = [int(s) for s in _comma_list(args.seeds)] if args.seeds else list(range(len(baseline)))
    refs = load_annotations(args.data)
    out_dir = _rooted(args.out)
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, os.path.join(out_dir, "compare_config_resolved.json"))

    rows, summary = compare_runs(baseline, lgd, refs, cfg.detector, seeds,
                                 cfg.eval.score_thresh, cfg.eval.nms_iou)
    with open(os.path.join(out_dir, "comparison.jsonl"), "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "comparison_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "baseline_ap50", "lgd_ap50", "delta_ap50",
                         "baseline_ap", "lgd_ap", "delta_ap"])
        for r in rows:
            writer.writerow([r["seed"], r["baseline"]["ap50"], r["lgd"]["ap50"],
                             r["delta"]["ap50"], r["baseline"]["ap"], r["lgd"]["ap"],
                             r["delta"]["ap"]])
    figures.plot_comparison(rows, summary, os.path.join(out_dir, "comparison.png"))
    print(format_comparison(rows, summary))
    return 0


def build_parser():
    parser = _Parser(prog="labeldistill",
                     description="label-guided self-distillation for a small detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="dataset file to write (JSONL)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--config", default=None)

    p = sub.add_parser("train", help="train baseline or distilled model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint's student path")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("inspect", help="dump per-scene tensors and heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("compare", help="evaluate paired baseline/distilled checkpoints")
    p.add_argument("--baseline", required=True, help="comma-separated checkpoints")
    p.add_argument("--lgd", required=True, help="comma-separated checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated run seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)

    return parser


_HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "compare": cmd_compare,
}


def run(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = _split_overrides(extra)
    return _HANDLERS[args.command](args, overrides)


def main(argv=None):
    try:
        code = run(argv)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = 1
    except (DatasetError, OSError, KeyError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = 2
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
