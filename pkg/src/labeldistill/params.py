"""Named parameter storage, initialization, and SGD with momentum."""

from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor


class MissingGradientError(RuntimeError):
    pass


class ParameterStore:
    """Hierarchically named trainable tensors plus per-entry momentum buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._momentum: dict[str, np.ndarray] = {}

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        self._momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def tensors(self):
        return {n: t for n, t in self.items()}

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def arrays(self):
        """name -> value array, for checkpointing."""
        return {n: self._params[n].data for n in self.names()}

    def load_arrays(self, arrays, strict=True):
        for name, arr in arrays.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unknown parameter in checkpoint: {name}")
                continue
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch loading {name}: {t.data.shape} vs {arr.shape}")
            t.data = arr.astype(np.float64).copy()
        if strict:
            missing = set(self._params) - set(arrays)
            if missing:
                raise KeyError(f"checkpoint missing parameters: {sorted(missing)}")


def sgd_update(store, lr, momentum=0.9, weight_decay=1e-4, frozen=()):
    """v <- momentum*v + (grad + wd*w); w <- w - lr*v; then zero all grads.

    Frozen entries keep their weights and momentum untouched. A missing gradient
    on a non-frozen parameter is an error (it means the graph never reached it).
    """
    frozen = set(frozen)
    for name, t in store.items():
        if name in frozen:
            continue
        if t.grad is None:
            raise MissingGradientError(f"no gradient for parameter {name}")
        v = store._momentum[name]
        v *= momentum
        v += t.grad + weight_decay * t.data
        t.data = t.data - lr * v
    store.zero_grad()


def he_uniform(rng, shape, fan_in):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def conv_init(store, rng, name, kh, kw, cin, cout, bias_value=0.0):
    w = store.add(f"{name}.w", he_uniform(rng, (kh, kw, cin, cout), kh * kw * cin))
    b = store.add(f"{name}.b", np.full(cout, bias_value))
    return w, b


def fc_init(store, rng, name, din, dout, bias=True, bias_value=0.0):
    # fc layers are not followed by ReLU here, so keep the variance flat
    w = store.add(f"{name}.w", xavier_uniform(rng, (din, dout), din, dout))
    if not bias:
        return w, None
    b = store.add(f"{name}.b", np.full(dout, bias_value))
    return w, b


def norm_init(store, name, dim):
    g = store.add(f"{name}.g", np.ones(dim))
    b = store.add(f"{name}.b", np.zeros(dim))
    return g, b
