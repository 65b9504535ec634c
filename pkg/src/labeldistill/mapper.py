"""Intra-object knowledge mapping and the distillation loss.

Interacted embeddings are painted back onto zero-initialized feature maps
under their object masks (overlaps sum), the object sum passes one 3x3 conv,
the context fill is added, and a refinement stack produces the instructive
map. Student features go through a small adaptation stack; the distillation
loss is a size-normalized MSE between instance-normalized maps with the
instructive side detached.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .params import conv_init, fc_init

IN_EPS = 1e-5


def init_mapper(store, rng, channels):
    fc_init(store, rng, "lgd.mapper.ctx", channels, channels)
    fc_init(store, rng, "lgd.mapper.inst", channels, channels)
    conv_init(store, rng, "lgd.mapper.g", 3, 3, channels, channels)
    for i in range(1, 4):
        w, _ = conv_init(store, rng, f"lgd.mapper.ref{i}", 3, 3, channels, channels)
        if i == 3:
            # damp the generator output at start so the shared head sees maps
            # compatible with its classification prior
            w.data = w.data * 0.1


def init_adapter(store, rng, channels):
    conv_init(store, rng, "lgd.adapt.conv1", 3, 3, channels, channels)
    conv_init(store, rng, "lgd.adapt.conv2", 3, 3, channels, channels)


def embedding_fills(store, embeddings, mask_rows, hw, context_on=True):
    """Paint embeddings under their masks for one scene at one level.

    embeddings: (N+1, C) tensor, row 0 context; mask_rows: (N+1, H*W);
    hw: (H, W). Returns (ctx_fill, obj_fill) maps of shape (H, W, C);
    overlapping objects sum.
    """
    n_rows = embeddings.shape[0]
    if mask_rows.shape[0] != n_rows:
        raise ag.ShapeError("embedding_fills", mask_rows.shape, embeddings.shape)
    h, w = hw
    c = embeddings.shape[1]
    if context_on:
        ctx = ag.affine(ag.narrow(embeddings, 0, 0, 1),
                        store["lgd.mapper.ctx.w"], store["lgd.mapper.ctx.b"])
        ctx_fill = ag.reshape(ag.matmul(ag.constant(mask_rows[0:1].T), ctx), (h, w, c))
    else:
        ctx_fill = ag.constant(np.zeros((h, w, c)))
    if n_rows > 1:
        inst = ag.affine(ag.narrow(embeddings, 0, 1, n_rows - 1),
                         store["lgd.mapper.inst.w"], store["lgd.mapper.inst.b"])
        obj_fill = ag.reshape(ag.matmul(ag.constant(mask_rows[1:].T), inst), (h, w, c))
    else:
        obj_fill = ag.constant(np.zeros((h, w, c)))
    return ctx_fill, obj_fill


def refine_fills(store, ctx_fill, obj_fill):
    """F_ref[ctx + G(obj)]; fills may be single maps or batched stacks."""
    x = ag.add(ctx_fill, ag.conv2d(obj_fill, store["lgd.mapper.g.w"], store["lgd.mapper.g.b"]))
    x = ag.relu(x)
    for i in range(1, 4):
        x = ag.conv2d(x, store[f"lgd.mapper.ref{i}.w"], store[f"lgd.mapper.ref{i}.b"])
    return x


def map_knowledge(store, embeddings, mask_rows, hw, context_on=True):
    """One scene, one level: interacted embeddings -> instructive map (H, W, C)."""
    ctx_fill, obj_fill = embedding_fills(store, embeddings, mask_rows, hw, context_on)
    return refine_fills(store, ctx_fill, obj_fill)


def adapt_student(store, level):
    """FitNet-style adaptation stack on one (possibly batched) student level."""
    x = ag.relu(ag.conv2d(level, store["lgd.adapt.conv1.w"], store["lgd.adapt.conv1.b"]))
    return ag.conv2d(x, store["lgd.adapt.conv2.w"], store["lgd.adapt.conv2.b"])


def distill_loss(adapted_pyr, instructive_pyr, eps=IN_EPS):
    """Mean squared error between instance-normalized pyramids.

    The instructive side is detached, so this loss reaches only the student
    branch (backbone and adaptation stack). Normalization is by the total
    per-scene pyramid size; batched inputs average over the batch.
    """
    total = None
    n_total = 0
    batch = 1
    for xs, xi in zip(adapted_pyr, instructive_pyr):
        if xs.shape != xi.shape:
            raise ag.ShapeError("distill_loss", xs.shape, xi.shape)
        if xs.data.ndim == 4:
            batch = xs.shape[0]
            n_total += xs.data.size // batch
        else:
            n_total += xs.data.size
        d = ag.sub(ag.instance_norm(xs, eps), ag.instance_norm(ag.detach(xi), eps))
        term = ag.tsum(ag.mul(d, d))
        total = term if total is None else ag.add(total, term)
    return ag.mul(total, ag.constant(1.0 / (n_total * batch)))
