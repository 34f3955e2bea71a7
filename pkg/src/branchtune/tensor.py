"""Dense float tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays.  Each operation that involves a
tensor requiring gradients records its inputs and a backward closure on
the output; ``backward`` on a scalar loss walks the recorded graph in
reverse topological order and accumulates gradients additively into
``.grad``.  Gradients are never zeroed implicitly; call ``zero_grads``
between optimization steps.

Training runs in float32.  Constructors accept ``dtype=np.float64`` for
a double-precision mode used by finite-difference gradient checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an operation receives incompatibly shaped operands."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording entirely."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        # explicit double input keeps double (gradient-check mode)
        return arr
    return arr.astype(DEFAULT_DTYPE, copy=False)


class Tensor:
    """A numpy array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def numpy(self) -> np.ndarray:
        """A detached copy of the values."""
        return np.array(self.data, copy=True)

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _from_op(data: np.ndarray, parents: Sequence[Tensor],
             backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- constructors ------------------------------------------------------------


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    for s in shape:
        if not isinstance(s, (int, np.integer)) or s <= 0:
            raise ShapeError(f"extents must be positive integers, got {shape}")
    return shape


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    shape = _check_shape(shape)
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE),
                  requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    shape = _check_shape(shape)
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE),
                  requires_grad=requires_grad)


def randn(shape, seed: int, stddev: float = 1.0, requires_grad: bool = False,
          dtype=None) -> Tensor:
    """Normal samples from a dedicated generator; same seed, same values."""
    shape = _check_shape(shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.standard_normal(shape, dtype=dtype or DEFAULT_DTYPE) * stddev
    return Tensor(data.astype(dtype or DEFAULT_DTYPE, copy=False),
                  requires_grad=requires_grad)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _from_op(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bw(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(-g)

    return _from_op(-a.data, (a,), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a plain-number exponent."""
    if isinstance(exponent, Tensor):
        raise TypeError("exponent must be a plain number")
    data = a.data ** exponent

    def bw(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _from_op(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * data)

    return _from_op(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _from_op(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bw(g):
        a._accumulate(g * (a.data > 0))

    return _from_op(data, (a,), bw)


# -- linear algebra and shaping ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _from_op(data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")

    def bw(g):
        a._accumulate(g.T)

    return _from_op(a.data.T, (a,), bw)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _from_op(data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return _from_op(data, tensors, bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _from_op(np.asarray(data), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        scale = np.asarray(1.0 / count, dtype=a.data.dtype)
        if axis is None:
            a._accumulate(np.broadcast_to(g * scale, a.data.shape).copy())
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
        a._accumulate(np.broadcast_to(g * scale, a.data.shape).copy())

    return _from_op(np.asarray(data), (a,), bw)


# -- gradient flow control ---------------------------------------------------


def stop_gradient(a: Tensor) -> Tensor:
    """Identity on values; the backward pass propagates nothing through it.

    Parameters upstream of ``a`` receive no gradient via this path, so the
    computed gradient of any loss treats ``stop_gradient(a)`` as a constant.
    """
    return Tensor(a.data, requires_grad=False)


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar loss over the recorded graph."""
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require gradients; nothing to backpropagate")

    # iterative topological sort; recursion would overflow on deep graphs
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- convolution and pooling -------------------------------------------------


def _norm_padding(padding) -> tuple[int, int]:
    if isinstance(padding, (int, np.integer)):
        ph = pw = int(padding)
    else:
        ph, pw = (int(p) for p in padding)
    if ph < 0 or pw < 0:
        raise ShapeError(f"padding must be non-negative, got {(ph, pw)}")
    return ph, pw


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int,
            ph: int, pw: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    img = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for xk in range(kw):
            x_max = xk + stride * ow
            col[:, :, y, xk, :, :] = img[:, :, y:y_max:stride, xk:x_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1), oh, ow


def _col2im(dcol: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int,
            stride: int, ph: int, pw: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    dcol = dcol.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcol.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for xk in range(kw):
            x_max = xk + stride * ow
            # overlapping windows must accumulate
            img[:, :, y:y_max:stride, xk:x_max:stride] += dcol[:, :, y, xk, :, :]
    return img[:, :, ph:ph + h, pw:pw + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding=(0, 0)) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW kernels.

    Output extent per spatial dim is ``floor((S + 2p - K) / stride) + 1``
    with zero padding of ``p`` rows/columns on each side.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, "
                         f"got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"channel mismatch: input has {c} channels, "
                         f"kernel expects {i}")
    ph, pw = _norm_padding(padding)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"non-positive output size {oh}x{ow} for input "
                         f"{h}x{w}, kernel {kh}x{kw}, padding {(ph, pw)}, "
                         f"stride {stride}")

    col, oh, ow = _im2col(x.data, kh, kw, stride, ph, pw)
    w_col = weight.data.reshape(o, -1).T
    out = col @ w_col
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g_flat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g_flat.sum(axis=0))
        if weight.requires_grad:
            weight._accumulate((col.T @ g_flat).T.reshape(weight.data.shape))
        if x.requires_grad:
            dcol = g_flat @ w_col.T
            x._accumulate(_col2im(dcol, x.data.shape, kh, kw, stride,
                                  ph, pw, oh, ow))

    return _from_op(np.ascontiguousarray(out), parents, bw)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2x2 expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {h}x{w} too small for 2x2 pooling")
    win = x.data[:, :, :2 * oh, :2 * ow].reshape(n, c, oh, 2, ow, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = np.zeros_like(x.data)
        dwin = dwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx[:, :, :2 * oh, :2 * ow] = dwin.reshape(n, c, 2 * oh, 2 * ow)
        x._accumulate(dx)

    return _from_op(np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an NCHW tensor, yielding (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {x.shape}")
    return tmean(x, axis=(2, 3))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    Raises ValueError if any slice has zero (or non-finite) norm; there is
    no epsilon fudge, the gradient is the exact one of x / ||x||.
    """
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    norms = np.sqrt(sq.data)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0):
        raise ValueError("cannot normalize: zero or non-finite norm encountered")
    return mul(x, power(sq, -0.5))
