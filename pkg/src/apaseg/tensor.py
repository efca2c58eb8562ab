"""Reverse-mode autodiff over dense numpy arrays.

The whole package runs on this substrate: a ``Tensor`` wraps an ndarray and
records enough of the computation graph to backpropagate a scalar. Layout
conventions are (N, C, H, W, D) for volumetric features and (N, C, A, B) for
plane features obtained by collapsing one spatial axis.

Float32 is the working precision for training; gradient verification builds
everything in float64.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """An operation's shape contract was violated."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (forward-only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense array plus an optional gradient accumulator and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph machinery -----------------------------------------------------

    def backward(self, grad=None):
        """Backpropagate from this tensor (scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        for node in reversed(topo):
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            node.grad = None  # free intermediate grads


class Parameter(Tensor):
    """A leaf tensor owned by a module; always participates in backward."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def _fail_item(t):
    raise ShapeError(f"item() on non-scalar tensor of shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return _make(a.data + b, (a,), lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b):
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return _make(a.data * b, (a,), lambda g: (g * b,))
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def sub(a, b):
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return _make(a.data - b, (a,), lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def div(a, b):
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        inv = 1.0 / b
        return _make(a.data * inv, (a,), lambda g: (g * inv,))
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def rsub(a, b):
    """b - a, keeping a's dtype when b is a python scalar."""
    if isinstance(b, (int, float)):
        return _make(b - a.data, (a,), lambda g: (-g,))
    return sub(_as_tensor(b), a)


def rdiv(a, b):
    """b / a, keeping a's dtype when b is a python scalar."""
    if isinstance(b, (int, float)):
        out = b / a.data
        return _make(out, (a,), lambda g: (-g * out / a.data,))
    return div(_as_tensor(b), a)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def powi(a, p: float):
    a = _as_tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def clip_min(a, floor: float):
    """max(a, floor); gradient passes only where a > floor."""
    a = _as_tensor(a)
    mask = a.data > floor
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape
    return _make(
        np.asarray(out),
        (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims),),
    )


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.data.size // max(np.asarray(out).size, 1)
    return _make(
        np.asarray(out),
        (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,),
    )


def tmax(a, axis: int, keepdims=False):
    """Max along one axis; ties route the gradient to the first argmax."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.max(a.data, axis=axis, keepdims=keepdims)
    shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros(shape, dtype=dtype)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis)
        return (gx,)

    return _make(np.asarray(out), (a,), vjp)


# -- shape manipulation ---------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = _as_tensor(a)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, key):
    a = _as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[key] += g
        return (gx,)

    return _make(a.data[key], (a,), vjp)


def concatenate(tensors, axis: int):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def unsqueeze(a, axis: int):
    a = _as_tensor(a)
    return reshape(a, a.shape[:axis] + (1,) + a.shape[axis:])


# -- composite ops used across the package ------------------------------------


def softmax(a, axis: int):
    """Numerically stable softmax along ``axis``."""
    m = tmax(a, axis=axis, keepdims=True)
    z = exp(sub(a, m))
    return div(z, tsum(z, axis=axis, keepdims=True))


NORM_EPS = 1e-5


def norm_act(x):
    """Instance normalization over spatial dims followed by rectification.

    Statistics are per (sample, channel). A single-element spatial slice has
    no usable statistics, so normalization is skipped and only the rectifier
    is applied.
    """
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"norm_act expects (N, C, *spatial), got shape {x.shape}")
    spatial = tuple(range(2, x.ndim))
    if int(np.prod([x.shape[i] for i in spatial])) < 2:
        return relu(x)
    mu = tmean(x, axis=spatial, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=spatial, keepdims=True)
    return relu(div(centered, sqrt(add(var, NORM_EPS))))


def axis_pool(x, axis: int, mode: str):
    """Collapse one spatial axis of a (N, C, H, W, D) tensor.

    ``axis`` is the array axis (2, 3 or 4). Mean pooling is differentiable
    everywhere; max pooling sends the subgradient to the first argmax in
    scan order.
    """
    x = _as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"axis_pool expects a 5-d tensor, got shape {x.shape}")
    if axis not in (2, 3, 4):
        raise ShapeError(f"axis_pool axis must be 2, 3 or 4, got {axis}")
    if mode == "mean":
        return tmean(x, axis=axis)
    if mode == "max":
        return tmax(x, axis=axis)
    raise ValueError(f"unknown axis_pool mode {mode!r}")


def avg_pool3d(x):
    """2x2x2 average pooling with stride 2; every spatial extent must be even."""
    x = _as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"avg_pool3d expects a 5-d tensor, got shape {x.shape}")
    n, c, h, w, d = x.shape
    if h % 2 or w % 2 or d % 2:
        raise ShapeError(f"avg_pool3d needs even spatial extents, got {(h, w, d)}")
    y = reshape(x, (n, c, h // 2, 2, w // 2, 2, d // 2, 2))
    return tmean(y, axis=(3, 5, 7))


# -- operator sugar -------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = add
Tensor.__mul__ = mul
Tensor.__rmul__ = mul
Tensor.__sub__ = sub
Tensor.__rsub__ = rsub
Tensor.__truediv__ = div
Tensor.__rtruediv__ = rdiv
Tensor.__neg__ = neg
Tensor.__pow__ = powi
Tensor.__getitem__ = getitem
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.max = tmax
Tensor.reshape = reshape
Tensor.transpose = transpose
Tensor.exp = exp
Tensor.log = log
Tensor.sqrt = sqrt
Tensor.relu = relu
