"""Inter-object relation adaption by multi-head cross-attention.

Appearance embeddings of the current scale act as queries against the
scale-invariant label embeddings as keys and values (an ablation flag swaps
the roles). Query and key maps carry no bias so that attention weights are
invariant to constant query shifts; per-head value and output projections
do. The softmax temperature defaults to sqrt(head_dim), with a sqrt(C)
mode kept for comparison.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .params import fc_init

TEMPERATURE_MODES = ("per-head", "full")


def init_cross_attention(store, rng, channels, heads):
    if channels % heads:
        raise ValueError(f"head count {heads} must divide channels {channels}")
    dh = channels // heads
    for t in range(1, heads + 1):
        fc_init(store, rng, f"lgd.attn.h{t}.q", channels, dh, bias=False)
        fc_init(store, rng, f"lgd.attn.h{t}.k", channels, dh, bias=False)
        fc_init(store, rng, f"lgd.attn.h{t}.v", channels, dh)
    fc_init(store, rng, "lgd.attn.proj", channels, channels)


def attention_temperature(channels, heads, mode="per-head"):
    if mode == "per-head":
        return math.sqrt(channels / heads)
    if mode == "full":
        return math.sqrt(channels)
    raise ValueError(f"unknown temperature mode: {mode}")


def cross_attention(store, queries, keys_values, heads, tau):
    """(E, weights): interacted embeddings (N+1, C) and per-head weights.

    queries and keys_values are (N+1, C) tensors with equal row counts;
    weights come back as a (T, N+1, N+1) array, each row summing to 1.
    """
    if queries.shape != keys_values.shape:
        raise ag.ShapeError("cross_attention", queries.shape, keys_values.shape)
    parts = []
    weights = []
    for t in range(1, heads + 1):
        q = ag.matmul(queries, store[f"lgd.attn.h{t}.q.w"])
        k = ag.matmul(keys_values, store[f"lgd.attn.h{t}.k.w"])
        v = ag.affine(keys_values, store[f"lgd.attn.h{t}.v.w"], store[f"lgd.attn.h{t}.v.b"])
        scores = ag.matmul(q, ag.transpose(k, (1, 0)))
        w = ag.softmax_scaled(scores, tau)
        weights.append(w.data.copy())
        parts.append(ag.matmul(w, v))
    u = ag.concat(parts, axis=-1)
    e = ag.affine(u, store["lgd.attn.proj.w"], store["lgd.attn.proj.b"])
    return e, np.stack(weights, axis=0)
