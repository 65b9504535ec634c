"""Tiny anchor-free student detector.

Backbone: four stride-2 3x3 conv blocks with ReLU, 1x1 lateral projections
and a top-down sum producing a two-level pyramid (strides 8 and 16, shared
channel width). Head: a small shared conv tower with per-location class
logits and exp-positive box distances, FCOS-style center-inside assignment,
focal + IoU loss, and greedy per-class NMS for decoding.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autograd as ag
from .params import conv_init


REG_CLAMP = 20.0  # bound on log-distances before exp


@dataclasses.dataclass
class DetectorConfig:
    channels: int = 64
    num_classes: int = 3
    strides: tuple = (8, 16)
    # per level, (lo, hi]: a box is assigned where its longer side in pixels fits
    size_ranges: tuple = ((0.0, 32.0), (32.0, math.inf))
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    prior_prob: float = 0.01
    score_thresh: float = 0.05
    nms_iou: float = 0.5

    @property
    def num_levels(self):
        return len(self.strides)


def init_student(store, rng, cfg: DetectorConfig):
    if tuple(cfg.strides) != (8, 16):
        raise ValueError("the backbone realizes exactly two levels at strides 8 and 16")
    c = cfg.channels
    widths = [max(4, c // 4), max(8, c // 2), c, c]
    cin = 3
    for i, cout in enumerate(widths, start=1):
        conv_init(store, rng, f"student.backbone.block{i}", 3, 3, cin, cout)
        cin = cout
    conv_init(store, rng, "student.backbone.lat1", 1, 1, widths[2], c)
    conv_init(store, rng, "student.backbone.lat2", 1, 1, widths[3], c)
    init_head(store, rng, cfg, prefix="head")


def init_head(store, rng, cfg: DetectorConfig, prefix="head"):
    c = cfg.channels
    conv_init(store, rng, f"{prefix}.tower1", 3, 3, c, c)
    conv_init(store, rng, f"{prefix}.tower2", 3, 3, c, c)
    # rare-foreground prior keeps early classification loss small
    cls_bias = -math.log((1.0 - cfg.prior_prob) / cfg.prior_prob)
    conv_init(store, rng, f"{prefix}.cls", 3, 3, c, cfg.num_classes, bias_value=cls_bias)
    conv_init(store, rng, f"{prefix}.reg", 3, 3, c, 4)


def backbone_param_names(store):
    return [n for n in store.names() if n.startswith("student.backbone.")]


def forward_backbone(store, image, cfg: DetectorConfig):
    """image: Tensor (H, W, 3) or (B, H, W, 3) -> list of per-level Tensors."""
    shape = image.shape
    h, w = (shape[0], shape[1]) if len(shape) == 3 else (shape[1], shape[2])
    max_stride = max(cfg.strides)
    if h % max_stride or w % max_stride:
        raise ValueError(f"image size {h}x{w} not divisible by stride {max_stride}")

    x = image
    feats = []
    for i in range(1, 5):
        x = ag.relu(ag.conv2d(x, store[f"student.backbone.block{i}.w"],
                              store[f"student.backbone.block{i}.b"], stride=2))
        feats.append(x)
    c3, c4 = feats[2], feats[3]
    p2 = ag.conv2d(c4, store["student.backbone.lat2.w"], store["student.backbone.lat2.b"])
    p1 = ag.conv2d(c3, store["student.backbone.lat1.w"], store["student.backbone.lat1.b"])
    up = ag.nearest_resize(p2, h // cfg.strides[0], w // cfg.strides[0])
    p1 = ag.add(p1, up)
    return [p1, p2]


def detection_head(store, pyramid, cfg: DetectorConfig, prefix="head"):
    """Apply one head parameter set to every level.

    Returns per level (class logits, box distances); distances are in stride
    units and made positive through exp.
    """
    outputs = []
    for level in pyramid:
        t = ag.relu(ag.conv2d(level, store[f"{prefix}.tower1.w"], store[f"{prefix}.tower1.b"]))
        t = ag.relu(ag.conv2d(t, store[f"{prefix}.tower2.w"], store[f"{prefix}.tower2.b"]))
        logits = ag.conv2d(t, store[f"{prefix}.cls.w"], store[f"{prefix}.cls.b"])
        raw = ag.conv2d(t, store[f"{prefix}.reg.w"], store[f"{prefix}.reg.b"])
        # clamp keeps exp (and the IoU below it) inside float range
        raw = ag.maximum(ag.minimum(raw, ag.constant(REG_CLAMP)), ag.constant(-REG_CLAMP))
        dist = ag.exp(raw)
        outputs.append((logits, dist))
    return outputs


def assign_targets(scene, image_size, cfg: DetectorConfig):
    """FCOS-style assignment for one scene.

    A cell is positive iff its center lies inside a box whose longer pixel
    side falls in the level's size range; among containing boxes the
    smallest area wins. Returns per level (cls_target, reg_target, pos_mask)
    with background encoded as class index num_classes and background reg
    targets set to a harmless 1.0.
    """
    targets = []
    for (lo, hi), stride in zip(cfg.size_ranges, cfg.strides):
        h = image_size // stride
        w = image_size // stride
        cls_t = np.full((h, w), cfg.num_classes, dtype=np.int64)
        reg_t = np.ones((h, w, 4))
        best_area = np.full((h, w), np.inf)
        py = (np.arange(h) + 0.5)[:, None] * stride
        px = (np.arange(w) + 0.5)[None, :] * stride
        for ann in scene.annotations:
            x1, y1, x2, y2 = (v * image_size for v in ann.box)
            longer = max(x2 - x1, y2 - y1)
            if not (lo < longer <= hi):
                continue
            inside = (px > x1) & (px < x2) & (py > y1) & (py < y2)
            area = (x2 - x1) * (y2 - y1)
            take = inside & (area < best_area)
            if not take.any():
                continue
            best_area[take] = area
            cls_t[take] = ann.category
            ll = np.broadcast_to((px - x1) / stride, (h, w))[take]
            tt = np.broadcast_to((py - y1) / stride, (h, w))[take]
            rr = np.broadcast_to((x2 - px) / stride, (h, w))[take]
            bb = np.broadcast_to((y2 - py) / stride, (h, w))[take]
            reg_t[take] = np.stack([ll, tt, rr, bb], axis=-1)
        targets.append((cls_t, reg_t, (cls_t != cfg.num_classes).astype(np.float64)))
    return targets


def stack_targets(per_scene_targets, cfg: DetectorConfig):
    """Batch per-scene target maps: per level (cls (B,h,w), reg (B,h,w,4), pos)."""
    out = []
    for lvl in range(cfg.num_levels):
        cls_t = np.stack([t[lvl][0] for t in per_scene_targets])
        reg_t = np.stack([t[lvl][1] for t in per_scene_targets])
        pos = np.stack([t[lvl][2] for t in per_scene_targets])
        out.append((cls_t, reg_t, pos))
    return out


def detection_loss(head_out, targets, cfg: DetectorConfig):
    """Focal classification loss over all cells plus IoU loss over positives,
    normalized by max(1, #positives). Accepts batched or single-scene maps."""
    gamma, alpha = cfg.focal_gamma, cfg.focal_alpha
    k = cfg.num_classes
    n_pos = sum(float(pos.sum()) for _, _, pos in targets)
    norm = 1.0 / max(1.0, n_pos)

    total = None
    for (logits, dist), (cls_t, reg_t, pos) in zip(head_out, targets):
        if logits.shape[:-1] != cls_t.shape:
            raise ag.ShapeError("detection_loss", logits.shape, cls_t.shape)
        onehot = np.zeros(cls_t.shape + (k,))
        fg = cls_t < k
        if fg.any():
            idx = np.nonzero(fg)
            onehot[idx + (cls_t[fg],)] = 1.0
        t = ag.constant(onehot)
        p = ag.sigmoid(logits)
        one = ag.constant(1.0)
        pos_term = ag.mul(ag.mul(t, ag.mul(ag.sub(one, p), ag.sub(one, p))),
                          ag.softplus(ag.mul(logits, ag.constant(-1.0))))
        neg_term = ag.mul(ag.mul(ag.sub(one, t), ag.mul(p, p)), ag.softplus(logits))
        focal = ag.add(ag.mul(pos_term, ag.constant(alpha)),
                       ag.mul(neg_term, ag.constant(1.0 - alpha)))
        level_loss = ag.tsum(focal)

        # IoU term masked to positives; background reg targets are a harmless
        # 1.0 so the expression stays defined (and the reg branch always has a
        # gradient array, exactly zero when a level has no positives)
        tgt = ag.constant(reg_t)
        iw = ag.add(ag.minimum(narrow_last(dist, 0), narrow_last(tgt, 0)),
                    ag.minimum(narrow_last(dist, 2), narrow_last(tgt, 2)))
        ih = ag.add(ag.minimum(narrow_last(dist, 1), narrow_last(tgt, 1)),
                    ag.minimum(narrow_last(dist, 3), narrow_last(tgt, 3)))
        inter = ag.mul(iw, ih)
        area_p = ag.mul(ag.add(narrow_last(dist, 0), narrow_last(dist, 2)),
                        ag.add(narrow_last(dist, 1), narrow_last(dist, 3)))
        area_t = ag.mul(ag.add(narrow_last(tgt, 0), narrow_last(tgt, 2)),
                        ag.add(narrow_last(tgt, 1), narrow_last(tgt, 3)))
        iou = ag.div(inter, ag.sub(ag.add(area_p, area_t), inter))
        iou_loss = ag.mul(ag.mul(ag.log(iou), ag.constant(-1.0)),
                          ag.constant(pos[..., None]))
        level_loss = ag.add(level_loss, ag.tsum(iou_loss))

        total = level_loss if total is None else ag.add(total, level_loss)
    return ag.mul(total, ag.constant(norm))


def narrow_last(t, i):
    return ag.narrow(t, t.data.ndim - 1, i, 1)


def iou_xyxy(a, b):
    """IoU of two (..., 4) corner boxes, numpy."""
    ix = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    iy = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    inter = ix * iy
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms(boxes, scores, iou_thresh):
    """Greedy NMS: keep in score order, drop anything overlapping a keeper."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    for i in order:
        if all(iou_xyxy(boxes[i], boxes[j]) <= iou_thresh for j in keep):
            keep.append(i)
    return keep


def decode_detections(head_out, image_size, cfg: DetectorConfig,
                      score_thresh=None, nms_iou=None):
    """Head output for ONE scene -> list of (box, category, score), score-sorted.

    Boxes are normalized corner coordinates clipped to the image.
    """
    score_thresh = cfg.score_thresh if score_thresh is None else score_thresh
    nms_iou = cfg.nms_iou if nms_iou is None else nms_iou

    cand_boxes, cand_cls, cand_scores = [], [], []
    for (logits, dist), stride in zip(head_out, cfg.strides):
        lg = logits.data
        dd = dist.data
        if lg.ndim == 4:
            if lg.shape[0] != 1:
                raise ValueError("decode_detections expects a single scene")
            lg, dd = lg[0], dd[0]
        h, w, k = lg.shape
        scores = 1.0 / (1.0 + np.exp(-lg))
        py = (np.arange(h) + 0.5)[:, None] * stride
        px = (np.arange(w) + 0.5)[None, :] * stride
        x1 = (px - dd[..., 0] * stride) / image_size
        y1 = (py - dd[..., 1] * stride) / image_size
        x2 = (px + dd[..., 2] * stride) / image_size
        y2 = (py + dd[..., 3] * stride) / image_size
        boxes = np.clip(np.stack([x1, y1, x2, y2], axis=-1), 0.0, 1.0)
        mask = scores > score_thresh
        if not mask.any():
            continue
        ri, ci, ki = np.nonzero(mask)
        cand_boxes.append(boxes[ri, ci])
        cand_cls.append(ki)
        cand_scores.append(scores[ri, ci, ki])

    if not cand_boxes:
        return []
    boxes = np.concatenate(cand_boxes)
    cls = np.concatenate(cand_cls)
    scores = np.concatenate(cand_scores)

    results = []
    for c in range(cfg.num_classes):
        sel = np.nonzero(cls == c)[0]
        if sel.size == 0:
            continue
        keep = nms(boxes[sel], scores[sel], nms_iou)
        for i in keep:
            j = sel[i]
            results.append((boxes[j].copy(), int(c), float(scores[j])))
    results.sort(key=lambda r: -r[2])
    return results
