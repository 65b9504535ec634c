"""Label and appearance encoding.

Labels: each object's normalized box concatenated with a one-hot category
vector (one extra slot marks the whole-image context object) runs through a
shared per-row MLP; a global max over rows is concatenated back before the
output projection, keeping the encoder permutation-equivariant. Appearance:
each pyramid level is projected by a per-level 3x3 conv and sum-pooled
under every object's binary mask.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .data import CONTEXT_BOX
from .params import conv_init, fc_init, norm_init

ENCODER_KINDS = ("pointnet-lite", "mlp")


def descriptor_dim(num_classes):
    # box corners + one-hot over foreground classes + context slot
    return 4 + num_classes + 1


def build_descriptors(scene, num_classes):
    """(N+1, 4+K+1) rows; row 0 is the context object covering the image."""
    k = num_classes
    rows = np.zeros((len(scene.annotations) + 1, descriptor_dim(k)))
    rows[0, :4] = CONTEXT_BOX
    rows[0, 4 + k] = 1.0
    for i, ann in enumerate(scene.annotations, start=1):
        rows[i, :4] = ann.box
        rows[i, 4 + ann.category] = 1.0
    return rows


def init_label_encoder(store, rng, num_classes, channels, kind="pointnet-lite"):
    if kind not in ENCODER_KINDS:
        raise ValueError(f"unknown label encoder kind: {kind}")
    d = descriptor_dim(num_classes)
    fc_init(store, rng, "lgd.label_enc.fc1", d, 64)
    norm_init(store, "lgd.label_enc.ln1", 64)
    fc_init(store, rng, "lgd.label_enc.fc2", 64, 128)
    norm_init(store, "lgd.label_enc.ln2", 128)
    out_in = 256 if kind == "pointnet-lite" else 128
    fc_init(store, rng, "lgd.label_enc.out", out_in, channels)


def encode_labels(store, descriptors, kind="pointnet-lite"):
    """Descriptors (N+1, d) -> label embeddings (N+1, C)."""
    x = descriptors if isinstance(descriptors, ag.Tensor) else ag.constant(descriptors)
    h = ag.relu(ag.affine(x, store["lgd.label_enc.fc1.w"], store["lgd.label_enc.fc1.b"]))
    h = ag.layer_norm(h, store["lgd.label_enc.ln1.g"], store["lgd.label_enc.ln1.b"])
    h = ag.relu(ag.affine(h, store["lgd.label_enc.fc2.w"], store["lgd.label_enc.fc2.b"]))
    h = ag.layer_norm(h, store["lgd.label_enc.ln2.g"], store["lgd.label_enc.ln2.b"])
    if kind == "pointnet-lite":
        n = h.shape[0]
        glob = ag.reshape(ag.reduce_max(h, axis=0), (1, 128))
        tiled = ag.matmul(ag.constant(np.ones((n, 1))), glob)
        h = ag.concat([h, tiled], axis=-1)
    return ag.affine(h, store["lgd.label_enc.out.w"], store["lgd.label_enc.out.b"])


def init_projection(store, rng, channels, num_levels):
    for p in range(1, num_levels + 1):
        conv_init(store, rng, f"lgd.proj.p{p}", 3, 3, channels, channels)


def project_features(store, level, level_idx):
    """One 3x3 conv with per-level weights; level_idx counts from 1."""
    return ag.conv2d(level, store[f"lgd.proj.p{level_idx}.w"],
                     store[f"lgd.proj.p{level_idx}.b"])


def mask_pool(projected, mask_rows):
    """Sum-pool the projected map under each object's mask.

    projected: (H, W, C) tensor; mask_rows: (N+1, H*W) constant array.
    Returns appearance embeddings (N+1, C).
    """
    h, w, c = projected.shape
    if mask_rows.shape[1] != h * w:
        raise ag.ShapeError("mask_pool", mask_rows.shape, projected.shape)
    flat = ag.reshape(projected, (h * w, c))
    return ag.matmul(ag.constant(mask_rows), flat)
