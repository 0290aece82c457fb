"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation on tensors that require
gradients records a backward closure, and ``Tensor.backward()`` replays the
closures in reverse topological order. Arrays are always 64-bit floats in
row-major NCHW layout. Broadcasting is deliberately restricted to scalars
and per-channel ``(1, C, 1, 1)`` parameters so every gradient path stays
auditable.

Every forward op checks its output for NaN/Inf and raises instead of
propagating silently; ``log`` and ``div`` validate their domains up front.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for tensor engine errors."""


class ShapeError(AutodiffError):
    """Incompatible shapes or a disallowed broadcast pattern."""


class DomainError(AutodiffError):
    """Input outside an op's domain (log of non-positive, division by zero)."""


class NumericsError(AutodiffError):
    """An op produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"{op} produced NaN/Inf")


def _is_scalar_shape(shape: tuple) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _is_per_channel(small: tuple, big: tuple) -> bool:
    # per-channel parameter (1, C, 1, 1) against an NCHW activation
    return (
        len(small) == 4
        and len(big) == 4
        and small[0] == small[2] == small[3] == 1
        and small[1] == big[1]
    )


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    if _is_scalar_shape(sa) or _is_scalar_shape(sb):
        return
    if _is_per_channel(sa, sb) or _is_per_channel(sb, sa):
        return
    raise ShapeError(f"broadcast of {sa} with {sb} is not supported (scalar and per-channel only)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float64 array that participates in a gradient tape.

    ``grad`` is populated on leaf tensors (those created directly rather
    than by an op) after ``backward()``; repeated backward calls accumulate
    until ``zero_grad()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- tape -------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad leaf reachable from here.

        The tensor must be a scalar. Gradients accumulate across calls.
        """
        if self.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = g.copy()
                    else:
                        node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not (parent.requires_grad or parent._vjp is not None):
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root: Tensor):
    """Post-order over the op graph; reversed it visits each node before its inputs."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if any(p.requires_grad or p._vjp is not None for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


# -- elementwise ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def abs_(a) -> Tensor:
    # subgradient convention sign(0) = 0
    a = as_tensor(a)
    out = np.abs(a.data)
    return _make(out, (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; gradient is the logistic function."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        x = a.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _make(out, (a,), vjp, "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (a.data > 0.0),), "relu")


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = as_tensor(a)
    out = np.where(a.data > 0.0, a.data, alpha * a.data)
    return _make(out, (a,), lambda g: (g * np.where(a.data > 0.0, 1.0, alpha),), "leaky_relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient passes through wherever the input lies in [lo, hi]."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


# -- reductions -------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim if ax < 0 else ax for ax in axes)
    for ax in axes:
        if ax >= ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
    return axes


def reduce_sum(a, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def reduce_mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "mean")


# -- structural ops ----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat_channels(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(f"concat_channels got {first.shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _make(out, tuple(tensors), vjp, "concat_channels")


def slice_channels(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"channel slice [{start}:{stop}] invalid for {a.shape}")
    out = np.ascontiguousarray(a.data[:, start:stop])

    def vjp(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _make(out, (a,), vjp, "slice_channels")


def squeeze2x2(a) -> Tensor:
    """Space-to-depth: (N, C, H, W) -> (N, 4C, H/2, W/2). Pure permutation."""
    a = as_tensor(a)
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze2x2 needs even spatial extents, got {a.shape}")
    out = (
        a.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, 4 * c, h // 2, w // 2)
    )

    def vjp(g):
        return (_unsqueeze_data(g, c, h, w),)

    return _make(np.ascontiguousarray(out), (a,), vjp, "squeeze2x2")


def _unsqueeze_data(x: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    n = x.shape[0]
    return np.ascontiguousarray(
        x.reshape(n, c, 2, 2, h // 2, w // 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w)
    )


def unsqueeze2x2(a) -> Tensor:
    """Depth-to-space, exact inverse of :func:`squeeze2x2`."""
    a = as_tensor(a)
    n, c4, h2, w2 = a.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze2x2 needs channels divisible by 4, got {a.shape}")
    c, h, w = c4 // 4, 2 * h2, 2 * w2
    out = _unsqueeze_data(a.data, c, h, w)

    def vjp(g):
        return (
            np.ascontiguousarray(
                g.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, c4, h2, w2)
            ),
        )

    return _make(out, (a,), vjp, "unsqueeze2x2")


def mix_channels(a, q: np.ndarray) -> Tensor:
    """Per-pixel channel mixing out[n,:,h,w] = Q @ a[n,:,h,w] for a constant matrix Q."""
    a = as_tensor(a)
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[1] != a.shape[1]:
        raise ShapeError(f"mixing matrix {q.shape} does not match channels of {a.shape}")
    out = np.einsum("dc,nchw->ndhw", q, a.data)

    def vjp(g):
        return (np.einsum("cd,nchw->ndhw", q, g),)

    return _make(out, (a,), vjp, "mix_channels")


def nearest_resize(a, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbor resize by index scaling; replicates when growing,
    takes strided samples when shrinking."""
    a = as_tensor(a)
    n, c, h, w = a.shape
    rows = np.floor(np.arange(out_h) * (h / out_h)).astype(np.int64)
    cols = np.floor(np.arange(out_w) * (w / out_w)).astype(np.int64)
    sel_r = np.zeros((out_h, h))
    sel_r[np.arange(out_h), rows] = 1.0
    sel_c = np.zeros((out_w, w))
    sel_c[np.arange(out_w), cols] = 1.0
    out = np.einsum("oh,nchw,pw->ncop", sel_r, a.data, sel_c)

    def vjp(g):
        return (np.einsum("oh,ncop,pw->nchw", sel_r, g, sel_c),)

    return _make(out, (a,), vjp, "nearest_resize")


# -- linear algebra ops -------------------------------------------------------


def linear(x, w, b) -> Tensor:
    """Affine map rows(x) @ w + b for 2-D x (N, F), w (F, M), b (M,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear got x{x.shape}, w{w.shape}, b{b.shape}")
    out = x.data @ w.data + b.data

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(out, (x, w, b), vjp, "linear")


def conv2d(x, w, b, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with an (out, in, kh, kw) kernel.

    Symmetric zero padding; with a 3x3 kernel and padding=1 the spatial size
    is preserved. Gradients flow to the input, the kernel, and the bias.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    n, ci, h, wd = x.shape
    co, ci_k, kh, kw = w.shape
    if ci != ci_k:
        raise ShapeError(f"conv2d channel mismatch: input {ci} vs kernel {ci_k}")
    if b.shape != (co,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {co} output channels")
    p, s = int(padding), int(stride)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, ci, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    cols2 = cols.reshape(n, ci * kh * kw, ho * wo)
    w2 = w.data.reshape(co, ci * kh * kw)
    out = (w2 @ cols2).reshape(n, co, ho, wo) + b.data.reshape(1, co, 1, 1)

    def vjp(g):
        g2 = g.reshape(n, co, ho * wo)
        dw = np.einsum("nop,nfp->of", g2, cols2).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3))
        dcols = (w2.T @ g2).reshape(n, ci, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[
                    :, :, i, j
                ]
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        return dx, dw, db

    return _make(out, (x, w, b), vjp, "conv2d")


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int = 0, stride: int = 1) -> np.ndarray:
    """Six-nested-loop reference convolution used as an independent oracle."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    p, s = int(padding), int(stride)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    out = np.zeros((n, co, ho, wo))
    for bi in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bi, c, y * s + i, xx * s + j] * w[o, c, i, j]
                    out[bi, o, y, xx] = acc + b[o]
    return out


# -- verification oracles ------------------------------------------------------


def finite_difference_gradient(f, at: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f / d at for a tensor-to-scalar f.

    ``f`` receives a fresh Tensor and must be deterministic; the estimate is
    independent of the tape and serves as the gradient oracle.
    """
    base = at.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(as_tensor(f(Tensor(base))).data.reshape(()))
        flat[i] = orig - h
        fm = float(as_tensor(f(Tensor(base))).data.reshape(()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def numeric_jacobian(f, at: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Dense (out_dim, in_dim) Jacobian of a vector map by central differences."""
    base = np.asarray(at, dtype=np.float64).copy()
    flat = base.reshape(-1)
    cols = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = np.asarray(f(base.copy()), dtype=np.float64).reshape(-1)
        flat[i] = orig - h
        fm = np.asarray(f(base.copy()), dtype=np.float64).reshape(-1)
        flat[i] = orig
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)
