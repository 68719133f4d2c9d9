"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a node holding its operands and a backward closure. Calling
``backward()`` on a scalar walks the graph in reverse topological order,
accumulating gradients additively (so fan-out sums contributions).

numpy is the buffer/BLAS backend; broadcasting in elementwise ops follows
numpy rules and gradients are summed back to the operand shape.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "ShapeError", "tensor", "zeros", "ones",
    "set_default_dtype", "get_default_dtype", "precision", "checked",
    "is_checked", "no_grad", "matmul", "conv2d", "softmax", "relu",
    "mse_loss", "layer_scale", "concat", "stack", "upsample2x", "exp",
    "log", "sqrt", "sin", "cos", "where",
]


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf while checked mode was on."""


_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.checked = False
        _state.grad_enabled = True
    return _state


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _st().dtype = dtype


def get_default_dtype():
    return _st().dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (``"float32"``/``"float64"``)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _st().dtype = old


def is_checked() -> bool:
    return _st().checked


@contextlib.contextmanager
def checked(on: bool = True):
    """Raise NonFiniteError as soon as any op output contains NaN/Inf."""
    st = _st()
    old = st.checked
    st.checked = on
    try:
        yield
    finally:
        st.checked = old


@contextlib.contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or get_default_dtype()
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- construction helpers ---------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        st = _st()
        if st.checked and not np.all(np.isfinite(data)):
            raise NonFiniteError("non-finite value produced by forward op")
        needs = st.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def _accum(self, g: np.ndarray, owned: bool = False) -> None:
        """Add ``g`` into ``self.grad``.

        ``owned`` marks ``g`` as a buffer no other node will see, so it can be
        adopted without a copy.
        """
        if not self.requires_grad:
            return
        reduced = _unbroadcast(g, self.data.shape)
        owned = owned or reduced is not g
        if self.grad is None:
            if owned and reduced.dtype == self.data.dtype:
                self.grad = reduced
            else:
                self.grad = np.array(reduced, dtype=self.data.dtype, copy=True)
        else:
            self.grad += reduced

    # -- backward -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() needs a scalar loss; got shape %s" % (self.shape,))
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # interior nodes get fresh buffers; leaves keep accumulating
        for node in topo:
            if node._parents:
                node.grad = None
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            a._accum(g)
            b._accum(g)
        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accum(-g, True))

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            a._accum(g)
            b._accum(-g, True)
        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(g * b.data, True)
            if b.requires_grad:
                b._accum(g * a.data, True)
        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(g / b.data, True)
            if b.requires_grad:
                b._accum(-g * a.data / (b.data * b.data), True)
        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self

        def bw(g):
            a._accum(g * p * a.data ** (p - 1), True)
        return Tensor._make(a.data ** p, (a,), bw)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions / shape ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))
        return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[i] for i in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape), True))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        a = self
        return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                            lambda g: a._accum(g.transpose(inv), True))

    def swapaxes(self, i: int, j: int):
        axes = list(range(self.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(axes)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data
        a = self

        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            a._accum(full, True)
        return Tensor._make(np.ascontiguousarray(a.data[idx]), (a,), bw)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad=requires_grad)


# -- unary elementwise ---------------------------------------------------------

def _unary(fn, dfn):
    def op(x: Tensor) -> Tensor:
        x = _as_tensor(x)
        out_data = fn(x.data)
        return Tensor._make(out_data, (x,), lambda g: x._accum(g * dfn(x.data, out_data), True))
    return op


exp = _unary(np.exp, lambda x, y: y)
log = _unary(np.log, lambda x, y: 1.0 / x)
sqrt = _unary(np.sqrt, lambda x, y: 0.5 / y)
sin = _unary(np.sin, lambda x, y: np.cos(x))
cos = _unary(np.cos, lambda x, y: -np.sin(x))
tanh = _unary(np.tanh, lambda x, y: 1.0 - y * y)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: x._accum(g * mask, True))


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        a._accum(np.where(cond, g, 0), True)
        b._accum(np.where(cond, 0, g), True)
    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bw)


def layer_scale(x: Tensor, scale: Tensor, axis: int = 0) -> Tensor:
    """Multiply ``x`` by a per-channel scale vector along ``axis``."""
    shape = [1] * x.ndim
    shape[axis] = -1
    if scale.ndim != 1 or scale.shape[0] != x.shape[axis]:
        raise ShapeError(f"scale of shape {scale.shape} does not match axis {axis} of {x.shape}")
    return x * scale.reshape(shape)


# -- structural --------------------------------------------------------------

def concat(ts, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            t._accum(piece)
    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def stack(ts, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]

    def bw(g):
        for i, t in enumerate(ts):
            t._accum(np.take(g, i, axis=axis), True)
    return Tensor._make(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    a = x
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1))
        a._accum(g, True)
    return Tensor._make(out, (a,), bw)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def bw(g):
        if a.requires_grad:
            a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)), True)
        if b.requires_grad:
            b._accum(np.matmul(np.swapaxes(a.data, -1, -2), g), True)
    return Tensor._make(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        x._accum(gy, True)
    return Tensor._make(y, (x,), bw)


def mse_loss(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D cross-correlation (kernel not flipped).

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``w`` is ``[C_out, C_in, k, k]``.
    ``pad`` defaults to ``k // 2`` which preserves spatial size at stride 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] input and [O,C,k,k] weight, got {x.shape}, {w.shape}")
    n, c, h, wd = xd.shape
    o, ci, k, k2 = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if k != k2:
        raise ShapeError("conv2d supports square kernels only")
    if pad is None:
        pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    wt = w.data
    # [C, N, Hp, Wp] lets each kernel tap be a single [O,C] @ [C, N*ho*wo] product
    xpt = xp.transpose(1, 0, 2, 3)
    out = np.zeros((o, n, ho, wo), dtype=xd.dtype)
    taps = []
    for i in range(k):
        for j in range(k):
            sl = xpt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            sl = np.ascontiguousarray(sl).reshape(c, -1)
            taps.append(sl)
            out += (wt[:, :, i, j] @ sl).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data.reshape(o, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if unbatched:
        out = out[0]
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g4 = g[None] if unbatched else g
        gt = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(o, -1)
        if bias is not None and bias.requires_grad:
            bias._accum(gt.sum(axis=1), True)
        if w.requires_grad:
            gw = np.empty_like(wt)
            for t, (i, j) in enumerate((i, j) for i in range(k) for j in range(k)):
                gw[:, :, i, j] = gt @ taps[t].T
            w._accum(gw, True)
        if x.requires_grad:
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        (wt[:, :, i, j].T @ gt).reshape(c, n, ho, wo)
            gx = gxp.transpose(1, 0, 2, 3)
            if pad:
                gx = gx[:, :, pad:pad + h, pad:pad + wd]
            x._accum(gx[0] if unbatched else gx, True)
    return Tensor._make(out, parents, bw)
