"""Minimal dense-tensor library with reverse-mode differentiation.

Tensors wrap row-major float64 numpy arrays. Every op records a backward
closure; calling ``backward()`` on a scalar loss accumulates gradients
(additively) into each ``requires_grad`` tensor on the path. Gradients are
cleared explicitly between steps (see ``ParameterStore.zero_grad``).

Convolutions use cached gather indices (im2col) so that both the forward
pass and the input-gradient scatter are pure numpy gathers.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """An op received operands with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode pass from a scalar; accumulates into .grad additively."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None:
                node._backward(node.grad)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data):
    return Tensor(data, requires_grad=False)


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order[::-1]


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    _check_broadcast("add", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    _check_broadcast("sub", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    _check_broadcast("mul", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    _check_broadcast("div", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def exp(x):
    y = np.exp(x.data)

    def backward(g):
        _accum(x, g * y)

    return _make(y, (x,), backward)


def log(x):
    def backward(g):
        _accum(x, g / x.data)

    return _make(np.log(x.data), (x,), backward)


def sqrt(x):
    y = np.sqrt(x.data)

    def backward(g):
        _accum(x, g * (0.5 / y))

    return _make(y, (x,), backward)


def relu(x):
    def backward(g):
        _accum(x, g * (x.data > 0))

    return _make(np.maximum(x.data, 0.0), (x,), backward)


def sigmoid(x):
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _make(y, (x,), backward)


def softplus(x):
    # max(x,0) + log1p(exp(-|x|)) is stable for large |x|
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward(g):
        _accum(x, g * s)

    return _make(y, (x,), backward)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    _check_broadcast("maximum", a, b)
    pick_a = a.data >= b.data

    def backward(g):
        _accum(a, _unbroadcast(g * pick_a, a.shape))
        _accum(b, _unbroadcast(g * ~pick_a, b.shape))

    return _make(np.maximum(a.data, b.data), (a, b), backward)


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    _check_broadcast("minimum", a, b)
    pick_a = a.data <= b.data

    def backward(g):
        _accum(a, _unbroadcast(g * pick_a, a.shape))
        _accum(b, _unbroadcast(g * ~pick_a, b.shape))

    return _make(np.minimum(a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x, axis=None, keepdims=False):
    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a % x.data.ndim for a in axes):
                g = np.expand_dims(g, ax)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reduce_max(x, axis):
    """Max over one axis; gradient routes to the first argmax (torch convention)."""
    idx = x.data.argmax(axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accum(x, gx)

    return _make(y, (x,), backward)


def reshape(x, shape):
    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    inv = np.argsort(axes)

    def backward(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), backward)


def concat(tensors, axis=-1):
    ref = tensors[0].data.shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, s)
    sizes = [t.data.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=ax)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def stack(tensors, axis=0):
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != ref:
            raise ShapeError("stack", ref, t.data.shape)

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum(x, gx)

    return _make(x.data[sl], (x,), backward)


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def affine(x, w, b=None):
    """x @ w (+ b): the fully-connected layer over the last axis."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def detach(x):
    """Cut the graph: y = detach(x) carries no gradient back into x."""
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# convolution


_CONV_CACHE = {}


def _conv_geometry(h, w, kh, kw, stride, pad):
    key = (h, w, kh, kw, stride, pad)
    hit = _CONV_CACHE.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    rows = (np.arange(ho) * stride)[:, None, None, None] + np.arange(kh)[None, None, :, None]
    cols = (np.arange(wo) * stride)[None, :, None, None] + np.arange(kw)[None, None, None, :]
    fidx = (rows * wp + cols).reshape(ho * wo, kh * kw)  # patch -> padded flat cells
    # reverse map: padded cell -> the (patch, tap) entries that read it,
    # padded with a sentinel pointing at an all-zeros slot
    counts = np.bincount(fidx.reshape(-1), minlength=hp * wp)
    rmax = int(counts.max()) if counts.size else 0
    rev = np.full((hp * wp, rmax), fidx.size, dtype=np.int64)
    fill = np.zeros(hp * wp, dtype=np.int64)
    flat = fidx.reshape(-1)
    for entry, cell in enumerate(flat):
        rev[cell, fill[cell]] = entry
        fill[cell] += 1
    geo = (ho, wo, hp, wp, fidx, rev)
    _CONV_CACHE[key] = geo
    return geo


def _raw_conv(xd, wd, stride, pad):
    """Gather+matmul convolution on raw arrays; xd (B,H,W,Cin), wd (kh,kw,Cin,Cout)."""
    kh, kw, cin, cout = wd.shape
    bsz, h, wid, _ = xd.shape
    ho, wo, hp, wp, fidx, _ = _conv_geometry(h, wid, kh, kw, stride, pad)
    xpad = np.zeros((bsz, hp, wp, cin))
    xpad[:, pad:pad + h, pad:pad + wid, :] = xd
    cols = xpad.reshape(bsz, hp * wp, cin)[:, fidx, :]
    colmat = cols.reshape(bsz, ho * wo, kh * kw * cin)
    out = colmat @ wd.reshape(kh * kw * cin, cout)
    return out.reshape(bsz, ho, wo, cout), colmat


def conv2d(x, w, b=None, stride=1, pad=None):
    """2-D convolution, channels last.

    x: (H, W, Cin) or (B, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,).
    pad defaults to same-padding for stride 1 ((k-1)//2).
    """
    kh, kw, cin, cout = w.data.shape
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[-1] != cin:
        raise ShapeError("conv2d", x.shape, w.shape)
    if pad is None:
        pad = (kh - 1) // 2
    bsz, h, wid, _ = xd.shape
    ho, wo, hp, wp, fidx, rev = _conv_geometry(h, wid, kh, kw, stride, pad)

    out, colmat = _raw_conv(xd, w.data, stride, pad)
    wmat = w.data.reshape(kh * kw * cin, cout)
    if b is not None:
        out = out + b.data
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g
        gm = gd.reshape(bsz, ho * wo, cout)
        if w.requires_grad:
            gw = np.tensordot(colmat, gm, axes=([0, 1], [0, 1]))
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, gm.sum(axis=(0, 1)))
        if x.requires_grad:
            if stride == 1 and kh == kw:
                # input gradient is a correlation with the flipped kernel
                wflip = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2))
                dx, _ = _raw_conv(gd, wflip, 1, kh - 1 - pad)
            else:
                dcols = (gm @ wmat.T).reshape(bsz, ho * wo * kh * kw, cin)
                dcols = np.concatenate([dcols, np.zeros((bsz, 1, cin))], axis=1)
                dxpad = dcols[:, rev, :].sum(axis=2)
                dx = dxpad.reshape(bsz, hp, wp, cin)[:, pad:pad + h, pad:pad + wid, :]
            _accum(x, dx[0] if squeeze else dx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def nearest_resize(x, out_h, out_w):
    """Nearest-neighbour spatial resize; channels last, rank 3 or 4."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    _, h, w, _ = xd.shape
    ri = np.minimum((np.floor((np.arange(out_h) + 0.5) * h / out_h)).astype(np.int64), h - 1)
    ci = np.minimum((np.floor((np.arange(out_w) + 0.5) * w / out_w)).astype(np.int64), w - 1)
    y = xd[:, ri[:, None], ci[None, :], :]

    def backward(g):
        gd = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        np.add.at(gx, (slice(None), ri[:, None], ci[None, :], slice(None)), gd)
        _accum(x, gx[0] if squeeze else gx)

    return _make(y[0] if squeeze else y, (x,), backward)


# ---------------------------------------------------------------------------
# normalizations and softmax


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last (channel) axis, then scale and shift."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(_wrap(1.0), sqrt(add(var, _wrap(eps))))
    return add(mul(mul(xc, inv), gamma), beta)


def instance_norm(x, eps=1e-5):
    """Zero-mean unit-variance per channel over the spatial extent.

    Accepts (H, W, C) or (B, H, W, C); statistics never mix batch entries.
    """
    if x.data.ndim not in (3, 4):
        raise ShapeError("instance_norm", x.shape)
    axes = (0, 1) if x.data.ndim == 3 else (1, 2)
    mu = tmean(x, axis=axes, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=axes, keepdims=True)
    return mul(xc, div(_wrap(1.0), sqrt(add(var, _wrap(eps)))))


def softmax_scaled(scores, tau):
    """Temperature softmax over the last axis, stabilized by max-subtraction."""
    if tau <= 0:
        raise ValueError(f"softmax_scaled: tau must be positive, got {tau}")
    if not np.all(np.isfinite(scores.data)):
        raise ValueError("softmax_scaled: non-finite scores")
    z = scores.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(scores, (g - inner) * y / tau)

    return _make(y, (scores,), backward)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f, wrt, tol=1e-4, h=1e-5, samples_per_tensor=None, rng=None):
    """Compare the analytic gradient of scalar f() against central differences.

    wrt maps names to tensors f depends on. When samples_per_tensor is set,
    only that many randomly chosen coordinates per tensor are perturbed
    (needed for large parameter sets). Returns a report dict with the max
    relative error (unit floor on the denominator) and a pass flag.
    """
    if isinstance(wrt, (list, tuple)):
        wrt = {f"t{i}": t for i, t in enumerate(wrt)}
    rng = rng or np.random.default_rng(0)

    for t in wrt.values():
        t.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    loss.backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in wrt.items()}

    report = {"tol": tol, "max_rel_err": 0.0, "per_tensor": {}}
    for name, t in wrt.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if samples_per_tensor is not None and n > samples_per_tensor:
            coords = rng.choice(n, size=samples_per_tensor, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            fp = f().item()
            flat[c] = keep - h
            fm = f().item()
            flat[c] = keep
            fd = (fp - fm) / (2.0 * h)
            an = analytic[name].reshape(-1)[c]
            err = abs(fd - an) / max(abs(fd), abs(an), 1.0)
            worst = max(worst, err)
        report["per_tensor"][name] = worst
        report["max_rel_err"] = max(report["max_rel_err"], worst)
    report["passed"] = report["max_rel_err"] < tol
    return report


def softmax_temperature(dim):
    """Default variance-rectifying temperature for dot products of width dim."""
    return math.sqrt(dim)
