"""Average-precision evaluation and baseline-vs-distilled comparison.

Protocol: detections are matched greedily in descending score order to the
still-unmatched ground truth of the same class with the highest IoU at or
above the threshold; the precision-recall curve is integrated with
101-point interpolation; AP averages the 10 IoU thresholds 0.50:0.05:0.95
and AP50 is the single 0.5 cut.
"""

from __future__ import annotations

import dataclasses
import statistics

import numpy as np

from .detector import DetectorConfig, decode_detections, detection_head, forward_backbone, init_student, iou_xyxy
from .params import ParameterStore
from .train import load_student_checkpoint
from . import autograd as ag

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclasses.dataclass
class EvalResult:
    ap50: float
    ap: float
    per_class_ap50: dict
    per_class_ap: dict
    num_detections: int
    num_gts: int

    def to_dict(self):
        return dataclasses.asdict(self)


def match_detections(dets, gts, iou_threshold):
    """Greedy matching for one scene and one class.

    dets: (n, 4) boxes already in descending score order; gts: (m, 4).
    Returns a boolean TP flag per detection.
    """
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for i, box in enumerate(dets):
        best_j, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            iou = float(iou_xyxy(np.asarray(box), np.asarray(gt)))
            if iou >= iou_threshold and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            matched[best_j] = True
            tp[i] = True
    return tp


def average_precision(tp_flags, scores, num_gt):
    """101-point interpolated AP from per-detection TP flags."""
    if num_gt == 0:
        return float("nan")
    if len(tp_flags) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(tp_flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def compute_ap(detections_per_scene, gts_per_scene, iou_threshold, num_classes):
    """Per-class AP at one IoU threshold.

    detections_per_scene: list over scenes of (box, category, score) tuples;
    gts_per_scene: list over scenes of (box, category) tuples. Classes with
    no ground truth anywhere are reported as NaN and skipped by callers.
    """
    result = {}
    for c in range(num_classes):
        flags, scores = [], []
        num_gt = 0
        for dets, gts in zip(detections_per_scene, gts_per_scene):
            cls_gts = [np.asarray(b) for b, cat in gts if cat == c]
            num_gt += len(cls_gts)
            cls_dets = sorted([d for d in dets if d[1] == c], key=lambda d: -d[2])
            tp = match_detections([d[0] for d in cls_dets], cls_gts, iou_threshold)
            flags.extend(tp.tolist())
            scores.extend(d[2] for d in cls_dets)
        result[c] = average_precision(flags, scores, num_gt)
    return result


def pr_points(detections_per_scene, gts_per_scene, iou_threshold, num_classes):
    """Raw precision-recall points per class, for plotting."""
    out = {}
    for c in range(num_classes):
        flags, scores = [], []
        num_gt = 0
        for dets, gts in zip(detections_per_scene, gts_per_scene):
            cls_gts = [np.asarray(b) for b, cat in gts if cat == c]
            num_gt += len(cls_gts)
            cls_dets = sorted([d for d in dets if d[1] == c], key=lambda d: -d[2])
            flags.extend(match_detections([d[0] for d in cls_dets], cls_gts, iou_threshold).tolist())
            scores.extend(d[2] for d in cls_dets)
        if num_gt == 0 or not flags:
            out[c] = (np.zeros(0), np.zeros(0))
            continue
        order = np.argsort(-np.asarray(scores), kind="stable")
        tp = np.asarray(flags, dtype=np.float64)[order]
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(1.0 - tp)
        out[c] = (cum_tp / num_gt, cum_tp / np.maximum(cum_tp + cum_fp, 1e-12))
    return out


def _mean_defined(values):
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else 0.0


def evaluate_detections(detections_per_scene, gts_per_scene, num_classes):
    per50 = compute_ap(detections_per_scene, gts_per_scene, 0.5, num_classes)
    per_thr = {t: compute_ap(detections_per_scene, gts_per_scene, t, num_classes)
               for t in IOU_THRESHOLDS}
    per_class_ap = {c: _mean_defined([per_thr[t][c] for t in IOU_THRESHOLDS])
                    if not np.isnan(per50[c]) else float("nan")
                    for c in range(num_classes)}
    return EvalResult(
        ap50=_mean_defined(per50.values()),
        ap=_mean_defined(per_class_ap.values()),
        per_class_ap50={c: (None if np.isnan(v) else v) for c, v in per50.items()},
        per_class_ap={c: (None if np.isnan(v) else v) for c, v in per_class_ap.items()},
        num_detections=sum(len(d) for d in detections_per_scene),
        num_gts=sum(len(g) for g in gts_per_scene),
    )


def detect_scenes(store, det_cfg: DetectorConfig, scenes, score_thresh=None, nms_iou=None):
    """Student-path inference over scenes -> per-scene detection lists."""
    all_dets = []
    for scene in scenes:
        image = ag.constant(scene.image)
        pyramid = forward_backbone(store, image, det_cfg)
        head_out = detection_head(store, pyramid, det_cfg, "head")
        dets = decode_detections(head_out, scene.image.shape[0], det_cfg,
                                 score_thresh=score_thresh, nms_iou=nms_iou)
        all_dets.append(dets)
    return all_dets


def evaluate_checkpoint(ckpt_path, scene_refs, det_cfg: DetectorConfig,
                        score_thresh=None, nms_iou=None):
    """Evaluate the student path of a checkpoint (full or student-only)."""
    store = ParameterStore()
    init_student(store, np.random.default_rng(0), det_cfg)
    load_student_checkpoint(store, ckpt_path)
    scenes = [r.load() for r in scene_refs]
    dets = detect_scenes(store, det_cfg, scenes, score_thresh, nms_iou)
    gts = [[(np.asarray(a.box), a.category) for a in s.annotations] for s in scenes]
    return evaluate_detections(dets, gts, det_cfg.num_classes)


def compare_runs(baseline_ckpts, lgd_ckpts, scene_refs, det_cfg, seeds,
                 score_thresh=None, nms_iou=None):
    """Per-seed evaluation of paired checkpoints plus medians and deltas."""
    if not (len(baseline_ckpts) == len(lgd_ckpts) == len(seeds)):
        raise ValueError("baseline, distilled, and seed lists must align")
    rows = []
    for seed, bpath, lpath in zip(seeds, baseline_ckpts, lgd_ckpts):
        rb = evaluate_checkpoint(bpath, scene_refs, det_cfg, score_thresh, nms_iou)
        rl = evaluate_checkpoint(lpath, scene_refs, det_cfg, score_thresh, nms_iou)
        rows.append({
            "seed": int(seed),
            "baseline": {"ap50": rb.ap50, "ap": rb.ap},
            "lgd": {"ap50": rl.ap50, "ap": rl.ap},
            "delta": {"ap50": rl.ap50 - rb.ap50, "ap": rl.ap - rb.ap},
        })
    summary = {}
    for key in ("ap50", "ap"):
        summary[f"median_baseline_{key}"] = statistics.median(r["baseline"][key] for r in rows)
        summary[f"median_lgd_{key}"] = statistics.median(r["lgd"][key] for r in rows)
        summary[f"median_delta_{key}"] = statistics.median(r["delta"][key] for r in rows)
    return rows, summary


def format_comparison(rows, summary):
    lines = [f"{'seed':>6} {'base ap50':>10} {'lgd ap50':>10} {'d ap50':>8} "
             f"{'base ap':>9} {'lgd ap':>9} {'d ap':>8}"]
    for r in rows:
        lines.append(f"{r['seed']:>6} {r['baseline']['ap50']:>10.4f} {r['lgd']['ap50']:>10.4f} "
                     f"{r['delta']['ap50']:>+8.4f} {r['baseline']['ap']:>9.4f} "
                     f"{r['lgd']['ap']:>9.4f} {r['delta']['ap']:>+8.4f}")
    lines.append(f"{'median':>6} {summary['median_baseline_ap50']:>10.4f} "
                 f"{summary['median_lgd_ap50']:>10.4f} {summary['median_delta_ap50']:>+8.4f} "
                 f"{summary['median_baseline_ap']:>9.4f} {summary['median_lgd_ap']:>9.4f} "
                 f"{summary['median_delta_ap']:>+8.4f}")
    return "\n".join(lines)
