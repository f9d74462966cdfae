"""Dense tensors with reverse-mode automatic differentiation.

The backward pass is built out of the same differentiable operations it
differentiates: every op's vector-Jacobian product is expressed in tensor ops
rather than raw array math. A gradient computed with ``create_graph=True`` is
therefore itself a graph node and can be differentiated again, which is what
lets an outer loss be differentiated through a chain of unrolled SGD steps.

Data lives in numpy arrays (float64 by default, float32 for experiment
throughput). One computation graph has a single owner; independent graphs can
be used from independent workers.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array, optionally part of a computation graph.

    ``requires_grad`` marks a leaf whose gradient may be requested, or an
    interior node through which gradient flows. Interior nodes keep references
    to their parents and a VJP closure; leaves have neither.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "created_graph")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.created_graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Same data, cut off from the graph."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def tensor(shape, values, requires_grad=False, dtype=np.float64):
    """Build a leaf tensor from an explicit shape and a flat value list.

    Raises ValueError when product(shape) != len(values).
    """
    shape = tuple(int(s) for s in shape)
    flat = np.asarray(values, dtype=dtype).reshape(-1)
    n = int(np.prod(shape)) if shape else 1
    if flat.size != n:
        raise ValueError(f"shape {shape} wants {n} values, got {flat.size}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def from_array(arr, requires_grad=False):
    """Leaf tensor sharing the given numpy array (no copy)."""
    return Tensor(np.asarray(arr), requires_grad=requires_grad)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjp):
    """Result tensor; records the op only when grad can flow into it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Reduce a broadcast cotangent back to the pre-broadcast shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b):
    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(neg(g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b):
    def vjp(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b):
    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp)


def neg(a):
    def vjp(g):
        return (neg(g),)

    return _make(-a.data, (a,), vjp)


def pow_const(a, p):
    p = float(p)

    def vjp(g):
        return (mul(g, mul(Tensor(np.asarray(p, dtype=a.dtype)), pow_const(a, p - 1.0))),)

    return _make(a.data**p, (a,), vjp)


def exp(a):
    out_data = np.exp(a.data)

    def vjp(g):
        return (mul(g, out),)

    out = _make(out_data, (a,), vjp)
    return out


def log(a):
    def vjp(g):
        return (div(g, a),)

    return _make(np.log(a.data), (a,), vjp)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def vjp(g):
        return (div(g, mul(Tensor(np.asarray(2.0, dtype=a.dtype)), out)),)

    out = _make(out_data, (a,), vjp)
    return out


def tsum(a, axis=None, keepdims=False):
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)

    def vjp(g):
        if not keepdims:
            kept = list(a.shape)
            for ax in axes:
                kept[ax] = 1
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, a.shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


def broadcast_to(a, shape):
    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.broadcast_to(a.data, shape), (a,), vjp)


def reshape(a, shape):
    def vjp(g):
        return (reshape(g, a.shape),)

    return _make(a.data.reshape(shape), (a,), vjp)


def swapaxes(a, ax1, ax2):
    def vjp(g):
        return (swapaxes(g, ax1, ax2),)

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), vjp)


def matmul(a, b):
    """Matrix product on the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with ndim >= 2")

    def vjp(g):
        ga = _unbroadcast(matmul(g, swapaxes(b, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(matmul(swapaxes(a, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), vjp)


def relu(a):
    def vjp(g):
        # the 0/1 mask is locally constant, so second derivatives vanish a.e.
        return (mul(g, Tensor((a.data > 0).astype(a.dtype))),)

    return _make(np.maximum(a.data, 0.0), (a,), vjp)


# ---------------------------------------------------------------------------
# structural primitives (mutually inverse linear pairs)


def pad2d(a, tblr):
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    t, b, l, r = tblr
    width = [(0, 0)] * (a.ndim - 2) + [(t, b), (l, r)]

    def vjp(g):
        return (crop2d(g, tblr),)

    return _make(np.pad(a.data, width), (a,), vjp)


def crop2d(a, tblr):
    """Inverse of pad2d: drop (top, bottom, left, right) from the last two axes."""
    t, b, l, r = tblr
    h, w = a.shape[-2], a.shape[-1]

    def vjp(g):
        return (pad2d(g, tblr),)

    return _make(np.ascontiguousarray(a.data[..., t : h - b, l : w - r]), (a,), vjp)


def im2col(a, kh, kw):
    """(N,C,H,W) -> (C*kh*kw, N*Ho*Wo) patch matrix, stride 1, no padding.

    The batch lives in the column axis so a convolution is a single plain
    matrix product against a (F, C*kh*kw) kernel matrix.
    """
    n, c, h, w = a.shape
    ho, wo = h - kh + 1, w - kw + 1

    def vjp(g):
        return (col2im(g, (n, c, h, w), kh, kw),)

    win = sliding_window_view(a.data, (kh, kw), axis=(2, 3))  # (N,C,Ho,Wo,kh,kw)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return _make(np.ascontiguousarray(cols), (a,), vjp)


def col2im(a, img_shape, kh, kw):
    """Adjoint of im2col: scatter-add patch columns back into the image."""
    n, c, h, w = img_shape
    ho, wo = h - kh + 1, w - kw + 1

    def vjp(g):
        return (im2col(g, kh, kw),)

    gv = a.data.reshape(c, kh, kw, n, ho, wo)
    acc = np.zeros((c, n, h, w), dtype=a.dtype)
    for p in range(kh):
        for q in range(kw):
            acc[:, :, p : p + ho, q : q + wo] += gv[:, p, q]
    return _make(np.ascontiguousarray(acc.transpose(1, 0, 2, 3)), (a,), vjp)


def split_batch(a, n):
    """(F, N*L) -> (N, F, L): pull the batch axis out of the column axis."""
    f, nl = a.shape
    l = nl // n

    def vjp(g):
        return (join_batch(g),)

    return _make(np.ascontiguousarray(a.data.reshape(f, n, l).transpose(1, 0, 2)), (a,), vjp)


def join_batch(a):
    """Adjoint of split_batch: (N, F, L) -> (F, N*L)."""
    n, f, l = a.shape

    def vjp(g):
        return (split_batch(g, n),)

    return _make(np.ascontiguousarray(a.data.transpose(1, 0, 2).reshape(f, n * l)), (a,), vjp)


def upsample2x2(a):
    """Repeat each pixel of the last two axes into a 2x2 block."""
    n, c, h, w = a.shape

    def vjp(g):
        return (poolsum2x2(g),)

    rep = np.broadcast_to(a.data[:, :, :, None, :, None], (n, c, h, 2, w, 2))
    return _make(np.ascontiguousarray(rep).reshape(n, c, 2 * h, 2 * w), (a,), vjp)


def poolsum2x2(a):
    """Sum non-overlapping 2x2 windows of the last two axes."""
    n, c, h, w = a.shape

    def vjp(g):
        return (upsample2x2(g),)

    s = a.data.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
    return _make(s, (a,), vjp)


def gather_rows(a, idx):
    """Pick one column per row of a (N,C) tensor: out[i, 0] = a[i, idx[i]]."""
    n = a.shape[0]
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        return (scatter_rows(g, idx, a.shape[1]),)

    return _make(a.data[np.arange(n), idx][:, None], (a,), vjp)


def scatter_rows(a, idx, ncols):
    """Adjoint of gather_rows: place a (N,1) tensor into zeros at a column per row."""
    n = a.shape[0]
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        return (gather_rows(g, idx),)

    out = np.zeros((n, ncols), dtype=a.dtype)
    out[np.arange(n), idx] = a.data[:, 0]
    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# network ops


def linear(x, weight, bias):
    """x @ weight.T + bias, for x (N, in), weight (out, in), bias (out,)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight fan-in {weight.shape[-1]}")
    return add(matmul(x, swapaxes(weight, -1, -2)), bias)


def conv2d(x, kernel):
    """3x3 convolution, stride 1, zero padding 1: (N,C,H,W) -> (N,F,H,W)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if ck != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    cols = im2col(pad2d(x, (1, 1, 1, 1)), 3, 3)  # (C*9, N*H*W)
    km = reshape(kernel, (f, c * 9))
    out = split_batch(matmul(km, cols), n)  # (N, F, H*W)
    return reshape(out, (n, f, h, w))


def maxpool2d(x):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first (lowest-index) maximal element of the
    window, scanning row-major.
    """
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2d needs spatial size >= 2, got {h}x{w}")
    if h % 2 or w % 2:
        x = crop2d(x, (0, h % 2, 0, w % 2))
        h, w = h - h % 2, w - w % 2

    xd = x.data
    corners = (xd[:, :, 0::2, 0::2], xd[:, :, 0::2, 1::2], xd[:, :, 1::2, 0::2], xd[:, :, 1::2, 1::2])
    out_data = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    if not (_grad_enabled and x.requires_grad):
        return Tensor(out_data)

    # one winner per window; scan order (0,0),(0,1),(1,0),(1,1) breaks ties
    # toward the first maximal element
    mask = np.zeros((n, c, h, w), dtype=xd.dtype)
    taken = np.zeros(out_data.shape, dtype=bool)
    slots = ((0, 0), (0, 1), (1, 0), (1, 1))
    for corner, (i, j) in zip(corners, slots):
        sel = (corner == out_data) & ~taken
        mask[:, :, i::2, j::2] = sel
        taken |= sel
    mask_t = Tensor(mask)

    def vjp(g):
        return (mul(upsample2x2(g), mask_t),)

    return _make(out_data, (x,), vjp)


def instance_norm(x, eps=1e-5):
    """Normalize each (sample, channel) plane to mean 0, variance 1 (no affine).

    Fused: the forward is one node, and its backward uses the closed-form
    normalization gradient. When a gradient graph is being recorded the
    backward is rebuilt from differentiable ops so second derivatives stay
    exact; otherwise it runs on cached arrays.
    """
    if x.ndim != 4:
        raise ValueError("instance_norm expects (N,C,H,W)")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        if _grad_enabled:
            # rebuild from ops so the gradient is differentiable again
            eps_t = Tensor(np.asarray(eps, dtype=x.dtype))
            mu_t = tmean(x, axis=(2, 3), keepdims=True)
            xc_t = sub(x, mu_t)
            var_t = tmean(mul(xc_t, xc_t), axis=(2, 3), keepdims=True)
            inv_t = pow_const(add(var_t, eps_t), -0.5)
            y_t = mul(xc_t, inv_t)
            m1 = tmean(g, axis=(2, 3), keepdims=True)
            m2 = tmean(mul(g, y_t), axis=(2, 3), keepdims=True)
            return (mul(inv_t, sub(sub(g, m1), mul(y_t, m2))),)
        gd = g.data
        m1 = gd.mean(axis=(2, 3), keepdims=True)
        m2 = np.mean(gd * y, axis=(2, 3), keepdims=True)
        return (Tensor(inv * (gd - m1 - y * m2)),)

    return _make(y, (x,), vjp)


def flatten(x):
    """(N, ...) -> (N, prod(...))."""
    return reshape(x, (x.shape[0], -1))


def softmax_cross_entropy(logits, targets):
    """Mean over the batch of -log softmax(logits)[target].

    Stabilized by subtracting the per-row max (held constant, which leaves all
    derivatives exact). Targets are integer class indices in [0, C).
    """
    if logits.ndim != 2:
        raise ValueError("softmax_cross_entropy expects (N, C) logits")
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target out of range [0, {c})")
    m = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = sub(logits, m)
    lse = log(tsum(exp(z), axis=1, keepdims=True))  # (N,1)
    picked = gather_rows(z, targets)  # (N,1)
    return tmean(sub(lse, picked))


# ---------------------------------------------------------------------------
# backward


def _topo_order(root):
    """Reverse-mode visitation order; each node appears exactly once."""
    order = []
    visited = set()
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, wrt, create_graph=False):
    """Gradients of a scalar loss with respect to a list of tensors.

    Unreachable entries of ``wrt`` get zero gradients of matching shape. With
    ``create_graph=True`` the returned gradients are graph nodes that can be
    differentiated again; otherwise they are plain tensors.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt)

    grads = {}
    if loss.requires_grad:
        grads[id(loss)] = Tensor(np.ones_like(loss.data))
        order = _topo_order(loss)
        ctx = contextlib.nullcontext() if create_graph else no_grad()
        with ctx:
            for node in reversed(order):
                if node._vjp is None:
                    continue
                g = grads[id(node)]
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if not parent.requires_grad or pg is None:
                        continue
                    pid = id(parent)
                    if pid in grads:
                        grads[pid] = add(grads[pid], pg)
                    else:
                        grads[pid] = pg

    out = []
    for p in wrt:
        g = grads.get(id(p))
        if g is None:
            g = Tensor(np.zeros_like(p.data))
        g.created_graph = create_graph
        out.append(g)
    return out
