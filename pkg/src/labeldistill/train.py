"""Joint training of the student detector and the distillation modules.

One optimizer drives everything. The distillation loss switches on after a
configured fraction of training, the backbone stays frozen for an initial
fraction, and the learning rate steps down at two milestones; all three are
expressed as fractions of the total iteration count so short runs keep the
schedule shape. With mode "baseline" no distillation modules exist and the
objective is the plain detection loss.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import autograd as ag
from .attention import attention_temperature, cross_attention, init_cross_attention
from .data import mask_pyramid
from .detector import (DetectorConfig, assign_targets, backbone_param_names,
                       detection_head, detection_loss, forward_backbone,
                       init_head, init_student, stack_targets)
from .encoder import (build_descriptors, encode_labels, init_label_encoder,
                      init_projection, mask_pool, project_features)
from .mapper import (IN_EPS, adapt_student, distill_loss, embedding_fills,
                     init_adapter, init_mapper, refine_fills)
from .params import ParameterStore, sgd_update
from .serialize import load_tensors, save_tensors

MODES = ("baseline", "lgd")
QUERY_DIRECTIONS = ("student", "label")


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass
class TrainConfig:
    total_iters: int = 2000
    distill_start_frac: float = 1.0 / 6.0
    distill_end_frac: float | None = None
    backbone_freeze_frac: float = 1.0 / 9.0
    base_lr: float = 0.01              # reference value at batch size 16
    lr_milestone_fracs: tuple = (2.0 / 3.0, 8.0 / 9.0)
    lr_decay: float = 0.1
    warmup_frac: float = 0.05
    warmup_factor: float = 0.001
    max_grad_norm: float = 10.0        # 0 disables clipping
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    head_sharing: bool = True
    context_participation: bool = True
    query_direction: str = "student"
    label_encoder: str = "pointnet-lite"
    attn_heads: int = 8
    attn_temperature: str = "per-head"
    checkpoint_every: int = 0          # 0: final checkpoint only

    def validate(self):
        if self.query_direction not in QUERY_DIRECTIONS:
            raise ValueError(f"query_direction must be one of {QUERY_DIRECTIONS}")
        for frac in (self.distill_start_frac, self.backbone_freeze_frac,
                     *self.lr_milestone_fracs):
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"schedule fraction {frac} outside [0, 1]")
        if list(self.lr_milestone_fracs) != sorted(self.lr_milestone_fracs):
            raise ValueError("lr milestones must be ordered")


@dataclasses.dataclass
class Schedule:
    total_iters: int
    distill_start: int
    distill_end: int | None
    freeze_end: int
    milestones: tuple
    lr0: float
    lr_decay: float
    warmup_iters: int
    warmup_factor: float

    @classmethod
    def from_config(cls, tc: TrainConfig):
        total = tc.total_iters
        return cls(
            total_iters=total,
            distill_start=round(total * tc.distill_start_frac),
            distill_end=(None if tc.distill_end_frac is None
                         else round(total * tc.distill_end_frac)),
            freeze_end=round(total * tc.backbone_freeze_frac),
            milestones=tuple(round(total * f) for f in tc.lr_milestone_fracs),
            lr0=tc.base_lr * tc.batch_size / 16.0,
            lr_decay=tc.lr_decay,
            warmup_iters=round(total * tc.warmup_frac),
            warmup_factor=tc.warmup_factor,
        )

    def lr_at(self, it):
        lr = self.lr0 * self.lr_decay ** sum(1 for m in self.milestones if it >= m)
        if it < self.warmup_iters:
            alpha = it / max(1, self.warmup_iters)
            lr *= self.warmup_factor * (1.0 - alpha) + alpha
        return lr

    def frozen(self, it):
        return it < self.freeze_end

    def distilling(self, it):
        if it < self.distill_start:
            return False
        return self.distill_end is None or it < self.distill_end


@dataclasses.dataclass
class LossReport:
    iter: int
    l_det_s: float
    l_det_i: float
    l_distill: float
    l_total: float
    lr: float
    frozen: bool
    distilling: bool

    def to_dict(self):
        return dataclasses.asdict(self)


class Model:
    """Parameter store plus the configuration needed to run forward passes."""

    def __init__(self, det_cfg: DetectorConfig, train_cfg: TrainConfig, mode, seed):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        train_cfg.validate()
        self.det_cfg = det_cfg
        self.train_cfg = train_cfg
        self.mode = mode
        self.store = ParameterStore()
        rng = stream_rng(seed, "init")
        init_student(self.store, rng, det_cfg)
        if mode == "lgd":
            init_label_encoder(self.store, rng, det_cfg.num_classes,
                               det_cfg.channels, train_cfg.label_encoder)
            init_projection(self.store, rng, det_cfg.channels, det_cfg.num_levels)
            init_cross_attention(self.store, rng, det_cfg.channels, train_cfg.attn_heads)
            init_mapper(self.store, rng, det_cfg.channels)
            init_adapter(self.store, rng, det_cfg.channels)
            if not train_cfg.head_sharing:
                init_head(self.store, rng, det_cfg, prefix="lgd.inst_head")
        self.tau = attention_temperature(det_cfg.channels, train_cfg.attn_heads,
                                         train_cfg.attn_temperature)

    @property
    def inst_head_prefix(self):
        return "head" if self.train_cfg.head_sharing else "lgd.inst_head"


def stream_rng(seed, name):
    """Named deterministic substream of the root seed."""
    tag = int.from_bytes(name.encode("utf-8"), "little") % (2 ** 31)
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


class ScenePack:
    """Per-scene constants reused every time the scene appears in a batch."""

    def __init__(self, scene, det_cfg: DetectorConfig):
        self.scene = scene
        size = scene.image.shape[0]
        self.image = scene.image
        shapes = [(size // s, size // s) for s in det_cfg.strides]
        self.masks = mask_pyramid(scene, shapes)
        self.targets = assign_targets(scene, size, det_cfg)
        self.descriptors = build_descriptors(scene, det_cfg.num_classes)
        self.level_shapes = shapes


def instructive_pyramid(model: Model, pyramid, packs, collect_weights=False):
    """Build the instructive maps for a batch (and per-scene label embeddings).

    Returns (list of per-level (B,H,W,C) tensors, diagnostics dict).
    """
    store = model.store
    tc = model.train_cfg
    label_embeds = [encode_labels(store, p.descriptors, tc.label_encoder) for p in packs]
    diag = {"attention": []} if collect_weights else {}
    levels = []
    for lvl in range(model.det_cfg.num_levels):
        proj = project_features(store, pyramid[lvl], lvl + 1)
        h, w = packs[0].level_shapes[lvl]
        ctx_fills, obj_fills = [], []
        lvl_weights = []
        for b, pack in enumerate(packs):
            if proj.data.ndim == 4:
                pmap = ag.reshape(ag.narrow(proj, 0, b, 1), (h, w, model.det_cfg.channels))
            else:
                pmap = proj
            appear = mask_pool(pmap, pack.masks[lvl])
            if tc.query_direction == "student":
                e, wts = cross_attention(store, appear, label_embeds[b],
                                         tc.attn_heads, model.tau)
            else:
                e, wts = cross_attention(store, label_embeds[b], appear,
                                         tc.attn_heads, model.tau)
            if collect_weights:
                lvl_weights.append(wts)
            cf, of = embedding_fills(store, e, pack.masks[lvl], (h, w),
                                     tc.context_participation)
            ctx_fills.append(cf)
            obj_fills.append(of)
        if collect_weights:
            diag["attention"].append(lvl_weights)
        if proj.data.ndim == 4:
            ctx = ag.stack(ctx_fills, axis=0)
            obj = ag.stack(obj_fills, axis=0)
        else:
            ctx, obj = ctx_fills[0], obj_fills[0]
        levels.append(refine_fills(store, ctx, obj))
    return levels, diag


def batch_losses(model: Model, packs, distilling):
    """Forward pass for one batch; returns (total, det_s, det_i, distill) tensors."""
    store = model.store
    det_cfg = model.det_cfg
    images = ag.constant(np.stack([p.image for p in packs]))
    pyramid = forward_backbone(store, images, det_cfg)
    targets = stack_targets([p.targets for p in packs], det_cfg)
    l_det_s = detection_loss(detection_head(store, pyramid, det_cfg, "head"),
                             targets, det_cfg)
    if model.mode == "baseline":
        return l_det_s, l_det_s, None, None

    inst_pyr, _ = instructive_pyramid(model, pyramid, packs)
    l_det_i = detection_loss(
        detection_head(store, inst_pyr, det_cfg, model.inst_head_prefix),
        targets, det_cfg)
    total = ag.add(l_det_s, l_det_i)
    l_dist = None
    if distilling:
        adapted = [adapt_student(store, lvl) for lvl in pyramid]
        l_dist = distill_loss(adapted, inst_pyr)
        total = ag.add(total, l_dist)
    return total, l_det_s, l_det_i, l_dist


def train_step(model: Model, packs, it, schedule: Schedule):
    tc = model.train_cfg
    distilling = model.mode == "lgd" and schedule.distilling(it)
    total, l_det_s, l_det_i, l_dist = batch_losses(model, packs, distilling)

    if not np.isfinite(total.data).all():
        ids = [p.scene.id for p in packs]
        raise TrainingError(f"non-finite loss at iteration {it} on scenes {ids}")

    model.store.zero_grad()
    total.backward()
    if tc.max_grad_norm:
        clip_gradients(model.store, tc.max_grad_norm)
    frozen = set(backbone_param_names(model.store)) if schedule.frozen(it) else set()
    # parameters of currently inactive branches receive no gradient and stay put
    if model.mode == "lgd":
        if not distilling:
            frozen.update(n for n in model.store.names() if n.startswith("lgd.adapt."))
        if not tc.context_participation:
            frozen.update(n for n in model.store.names() if n.startswith("lgd.mapper.ctx."))
    lr = schedule.lr_at(it)
    sgd_update(model.store, lr=lr, momentum=tc.momentum,
               weight_decay=tc.weight_decay, frozen=frozen)

    return LossReport(
        iter=it,
        l_det_s=float(l_det_s.data),
        l_det_i=float(l_det_i.data) if l_det_i is not None else 0.0,
        l_distill=float(l_dist.data) if l_dist is not None else 0.0,
        l_total=float(total.data),
        lr=lr,
        frozen=schedule.frozen(it),
        distilling=distilling,
    )


def clip_gradients(store, max_norm):
    """Scale all gradients down when their global L2 norm exceeds max_norm."""
    sq = 0.0
    grads = [t.grad for _, t in store.items() if t.grad is not None]
    for g in grads:
        sq += float((g * g).sum())
    norm = sq ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def batch_iterator(num_scenes, batch_size, rng):
    """Seeded reshuffled epochs, yielding index lists forever."""
    while True:
        order = rng.permutation(num_scenes)
        for start in range(0, num_scenes, batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) == batch_size or num_scenes < batch_size:
                yield list(chunk)


def run_training(model: Model, scene_refs, out_dir, seed, log=None):
    """Iterate train_step over shuffled batches; write metrics and checkpoints.

    Returns the path of the final full checkpoint. The final state is also
    exported without any distillation tensors for inference use.
    """
    if not scene_refs:
        raise TrainingError("empty training dataset")
    os.makedirs(out_dir, exist_ok=True)
    tc = model.train_cfg
    schedule = Schedule.from_config(tc)
    packs = [ScenePack(ref.load(), model.det_cfg) for ref in scene_refs]
    batches = batch_iterator(len(packs), tc.batch_size, stream_rng(seed, "shuffle"))

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    reports = []
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        for it in range(tc.total_iters):
            batch = [packs[i] for i in next(batches)]
            report = train_step(model, batch, it, schedule)
            reports.append(report)
            metrics.write(json.dumps(report.to_dict()) + "\n")
            if log is not None and (it % 50 == 0 or it == tc.total_iters - 1):
                log(f"iter {it:5d} total {report.l_total:.4f} det_s {report.l_det_s:.4f} "
                    f"det_i {report.l_det_i:.4f} distill {report.l_distill:.5f} lr {report.lr:g}")
            if tc.checkpoint_every and (it + 1) % tc.checkpoint_every == 0:
                save_checkpoint(model, os.path.join(out_dir, f"ckpt_{it + 1}.bin"))

    final = os.path.join(out_dir, f"ckpt_{tc.total_iters}.bin")
    save_checkpoint(model, final)
    export_student_only(final, os.path.join(out_dir, "student_only_final.bin"))
    return final, reports


def scene_diagnostics(model: Model, pack: ScenePack):
    """Raw tensor dump for one scene: pyramids, masks, attention weights.

    Instance-normalized residuals (adapted student minus instructive) are
    included so mimicking quality can be inspected offline.
    """
    store = model.store
    image = ag.constant(pack.image)
    pyramid = forward_backbone(store, image, model.det_cfg)
    out = {"image": pack.image}
    for lvl, feat in enumerate(pyramid, start=1):
        h, w = pack.level_shapes[lvl - 1]
        out[f"student.x.p{lvl}"] = feat.data
        out[f"masks.p{lvl}"] = pack.masks[lvl - 1].reshape(-1, h, w)
    if model.mode == "lgd":
        inst_pyr, diag = instructive_pyramid(model, pyramid, [pack], collect_weights=True)
        for lvl in range(model.det_cfg.num_levels):
            adapted = adapt_student(store, pyramid[lvl])
            resid = ag.sub(ag.instance_norm(adapted, IN_EPS),
                           ag.instance_norm(inst_pyr[lvl], IN_EPS))
            out[f"instructive.p{lvl + 1}"] = inst_pyr[lvl].data
            out[f"student.adapted.p{lvl + 1}"] = adapted.data
            out[f"residual_in.p{lvl + 1}"] = resid.data
            out[f"attention.p{lvl + 1}"] = diag["attention"][lvl][0]
    return out


def save_checkpoint(model: Model, path):
    save_tensors(path, model.store.arrays())


def export_student_only(ckpt_path, out_path):
    """Strip every distillation tensor; what remains is all inference needs."""
    arrays = load_tensors(ckpt_path)
    save_tensors(out_path, {n: a for n, a in arrays.items() if not n.startswith("lgd.")})
    return out_path


def load_student_checkpoint(store, path):
    """Load the student subset (works on both full and student-only files)."""
    arrays = load_tensors(path)
    student = {n: a for n, a in arrays.items() if not n.startswith("lgd.")}
    store.load_arrays(student, strict=True)


def load_full_checkpoint(model: Model, path):
    model.store.load_arrays(load_tensors(path), strict=True)
