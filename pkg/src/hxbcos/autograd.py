"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the B-cos layers are provided. Values are numpy
arrays; the graph is built eagerly as operations run and swept in reverse
topological order by :meth:`Tensor.backward`.

Broadcasting is deliberately narrow: an operand may be a scalar (or size-1
array) or an array of the same rank whose mismatched extents are 1.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "elementwise",
    "maximum",
    "detach",
    "concat",
    "conv2d",
    "patch_norms",
    "reduce",
    "no_grad",
    "is_grad_enabled",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording a graph."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode AD needs.

    After ``backward`` every reachable tensor that requires gradients has
    ``grad`` set. Leaves accumulate across calls; intermediate tensors keep the
    gradient of the most recent sweep.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.detached = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward, op) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.detached = False
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # basic properties ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _lift(other, self), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _lift(other, self), self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __pow__(self, p):
        return elementwise("pow_const", self, p)

    def abs(self):
        return elementwise("abs", self)

    def sign(self):
        return elementwise("sign", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def log(self):
        return elementwise("log", self)

    def exp(self):
        return elementwise("exp", self)

    # reductions and shape ops ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return reduce("max_over_axis", self, axis, keepdims)

    def l2_norm(self, axis=None, keepdims=False):
        return reduce("l2_norm_over_axes", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape

        def backward(g):
            return (g.reshape(src),)

        return Tensor._make(self.data.reshape(shape), (self,), backward, "reshape")

    def __getitem__(self, idx):
        src_shape, dtype = self.shape, self.dtype

        def backward(g):
            out = np.zeros(src_shape, dtype=dtype)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(np.array(self.data[idx]), (self,), backward, "getitem")

    def astype(self, dtype) -> "Tensor":
        src = self.dtype

        def backward(g):
            return (g.astype(src),)

        return Tensor._make(self.data.astype(dtype), (self,), backward, "cast")

    # differentiation -------------------------------------------------------

    def _topo(self) -> list["Tensor"]:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
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

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``grad`` may seed a non-scalar output; without it the tensor must
        hold exactly one element.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones(self.shape, dtype=self.dtype)
        else:
            grad = _as_array(grad).astype(self.dtype, copy=False).reshape(self.shape)
        if not self.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g  # intermediate nodes hold the gradient of the latest sweep
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 and a.ndim <= b.ndim:
        return b.shape
    if b.size == 1 and b.ndim <= a.ndim:
        return a.shape
    if a.ndim == b.ndim and all(x == y or x == 1 or y == 1 for x, y in zip(a.shape, b.shape)):
        return tuple(max(x, y) for x, y in zip(a.shape, b.shape))
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) < g.ndim:
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, g.shape)) if s == 1 and t != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


_UNARY = {"abs", "sign", "sqrt", "sigmoid", "log", "exp"}
_BINARY = {"add", "sub", "mul", "div", "max2"}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply ``op`` per element.

    Unary ops ignore ``b``; ``pow_const`` takes a Python number as ``b``.
    Conventions at non-differentiable points: d|x|/dx = 0 and d sqrt(x)/dx = 0
    at x = 0, sign has zero gradient everywhere, and ``max2`` sends the
    gradient to ``a`` on ties.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    x = a.data

    if op == "pow_const":
        p = float(b)
        out = x if p == 1 else np.power(x, p) if p != 0 else np.ones_like(x)

        def backward(g):
            if p == 0:
                return (np.zeros_like(x),)
            if p == 1:
                return (g,)
            safe = np.where(x == 0, 1, x) if p < 1 else x
            d = p * np.power(safe, p - 1)
            if p < 1:
                d = np.where(x == 0, 0, d)
            return (g * d,)

        return Tensor._make(out.astype(x.dtype, copy=False), (a,), backward, "pow_const")

    if op in _UNARY:
        if op == "abs":
            out = np.abs(x)
            backward = lambda g: (g * np.sign(x),)  # noqa: E731
        elif op == "sign":
            out = np.sign(x)
            backward = lambda g: (np.zeros_like(x),)  # noqa: E731
        elif op == "sqrt":
            out = np.sqrt(x)

            def backward(g):
                pos = out > 0
                return (np.where(pos, g * 0.5 / np.where(pos, out, 1), 0).astype(x.dtype),)

        elif op == "sigmoid":
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            backward = lambda g: (g * out * (1 - out),)  # noqa: E731
        elif op == "log":
            out = np.log(x)
            backward = lambda g: (g / x,)  # noqa: E731
        else:
            out = np.exp(x)
            backward = lambda g: (g * out,)  # noqa: E731
        return Tensor._make(out, (a,), backward, op)

    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")

    b = _lift(b, a)
    y = b.data
    shape = _check_broadcast(x, y)
    sa, sb = x.shape, y.shape

    if op == "add":
        out = x + y

        def backward(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

    elif op == "sub":
        out = x - y

        def backward(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    elif op == "mul":
        out = x * y

        def backward(g):
            return _unbroadcast(g * y, sa), _unbroadcast(g * x, sb)

    elif op == "div":
        out = x / y

        def backward(g):
            gx = g / y
            return _unbroadcast(gx, sa), _unbroadcast(-gx * out, sb)

    else:
        take_a = x >= y
        out = np.where(take_a, x, y)

        def backward(g):
            return (_unbroadcast(np.where(take_a, g, 0), sa),
                    _unbroadcast(np.where(take_a, 0, g), sb))

    assert out.shape == shape
    return Tensor._make(out.astype(np.result_type(x, y), copy=False), (a, b), backward, op)


def maximum(a, b) -> Tensor:
    return elementwise("max2", a, b)


def detach(t: Tensor) -> Tensor:
    """Same values, treated as a constant by differentiation."""
    out = Tensor(t.data)
    out.op = "detach"
    out.detached = True
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "concat")


# reductions -----------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    return tuple(sorted(set(norm)))


def reduce(op: str, t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Reductions accumulate in float64 and cast back to the input dtype.

    ``max_over_axis`` takes a single axis and routes the gradient to the first
    maximal element.
    """
    x = t.data
    ax = _norm_axes(axes, x.ndim)
    if any(x.shape[i] == 0 for i in ax) or x.size == 0:
        raise ValueError(f"empty reduction over axes {ax} of shape {x.shape}")
    kept = tuple(1 if i in ax else s for i, s in enumerate(x.shape))

    def finish(v):
        v = np.asarray(v).astype(x.dtype, copy=False)
        return v.reshape(kept) if keepdims else v.reshape(
            tuple(s for i, s in enumerate(x.shape) if i not in ax))

    if op == "sum":
        out = finish(x.sum(axis=ax, dtype=np.float64))

        def backward(g):
            return (np.broadcast_to(g.reshape(kept), x.shape).astype(x.dtype),)

    elif op == "mean":
        count = int(np.prod([x.shape[i] for i in ax]))
        out = finish(x.mean(axis=ax, dtype=np.float64))

        def backward(g):
            return (np.broadcast_to(g.reshape(kept) / count, x.shape).astype(x.dtype),)

    elif op == "max_over_axis":
        if len(ax) != 1:
            raise ValueError("max_over_axis reduces exactly one axis")
        axis = ax[0]
        size = x.shape[axis]
        if size <= 8:
            # running comparison is much faster than argmax over a short axis
            lead = (slice(None),) * axis
            best = x[lead + (0,)]
            idx = np.zeros(best.shape, dtype=np.intp)
            for k in range(1, size):
                cand = x[lead + (k,)]
                better = cand > best
                best = np.where(better, cand, best)
                idx[better] = k
        else:
            idx = np.argmax(x, axis=axis)
            best = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
        out = finish(best)

        def backward(g):
            g = g.reshape(idx.shape)
            return (np.stack([np.where(idx == k, g, 0) for k in range(size)], axis=axis).astype(x.dtype),)

    elif op == "l2_norm_over_axes":
        norm = np.sqrt(np.square(x, dtype=np.float64).sum(axis=ax, keepdims=True))
        out = finish(norm)

        def backward(g):
            safe = np.where(norm > 0, norm, 1.0)
            return ((g.reshape(kept) * np.where(norm > 0, x / safe, 0.0)).astype(x.dtype),)

    else:
        raise ValueError(f"unknown reduction {op!r}")

    return Tensor._make(out, (t,), backward, op)


# convolution ------------------------------------------------------------------


def _out_extent(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh, kw, stride, padding):
    # channels-last gather: column order is (kh, kw, C)
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    x = x.transpose(0, 2, 3, 1)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def _col2im(dcols, shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = shape
    d = dcols.reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, :, i, j]
    if padding:
        dx = dx[:, padding:padding + h, padding:padding + w]
    return dx.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation with zero padding (im2col + matmul)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent ({ho}, {wo}) is not positive")
    dtype = np.result_type(x.data, weight.data)
    # inner products accumulate in float64 whatever the storage dtype
    cols, ho, wo = _im2col(x.data.astype(np.float64, copy=False), kh, kw, stride, padding)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1).astype(np.float64)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2).astype(dtype)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout).astype(np.float64)
        gx = gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
            gw = np.ascontiguousarray(gw, dtype=weight.dtype)
        if x.requires_grad:
            gx = _col2im(g2 @ wmat, x.shape, kh, kw, stride, padding, ho, wo).astype(x.dtype)
        return gx, gw

    return Tensor._make(out, (x, weight), backward, "conv2d")


def patch_norms(x: Tensor, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Euclidean norm of every zero-padded sliding patch, over all channels.

    Returns shape ``[N, 1, H', W']``; equal to
    ``sqrt(conv2d(x**2, ones[1, C, kh, kw]))``.
    """
    energy = (x * x).sum(axis=1, keepdims=True)
    ones = Tensor(np.ones((1, 1, kh, kw), dtype=x.dtype))
    return conv2d(energy, ones, stride=stride, padding=padding).sqrt()
