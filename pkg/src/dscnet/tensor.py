"""Dense float tensors with reverse-mode automatic differentiation.

The value type is a thin wrapper around a row-major numpy array.  While
gradients are enabled, every operation records a closure that pushes the
output adjoint back to its inputs; ``Tensor.backward`` replays those
closures in reverse topological order.  A tensor's buffer is treated as
immutable while any graph built from it is alive; optimizers and the
gradient checker update leaf buffers in place *between* graphs.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import BadAxis, NonFiniteValue, NotScalarLoss, ShapeMismatch

_GRAD_ENABLED = True
_DEBUG_FINITE = os.environ.get("DSCNET_DEBUG_FINITE", "") not in ("", "0")

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug_finite(flag: bool) -> None:
    """Toggle the NaN/Inf check run on every op output (off by default)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(flag)


class no_grad:
    """Context manager that disables graph recording; forward values are unchanged."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    # -- basic introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # -- graph machinery -----------------------------------------------------

    def backward(self) -> None:
        if self.data.ndim != 0:
            raise NotScalarLoss(f"backward root must be rank-0, got shape {self.data.shape}")
        self.grad = np.ones_like(self.data)
        for node in reversed(toposort(self)):
            if node._backward is not None:
                node._backward()

    def detach(self) -> "Tensor":
        # Shares the underlying buffer; drops grad tracking.
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = _make(_combine(self, other, np.add, "add"), (self, other), "add")
        if out.requires_grad:
            a, b = self, other

            def _bw():
                g = out.grad
                if a.requires_grad:
                    _accum(a, _unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(g, b.data.shape))

            out._backward = _bw
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        out = _make(_combine(self, other, np.multiply, "mul"), (self, other), "mul")
        if out.requires_grad:
            a, b = self, other

            def _bw():
                g = out.grad
                if a.requires_grad:
                    _accum(a, _unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(g * a.data, b.data.shape))

            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __sub__(self, other):
        other = as_tensor(other)
        out = _make(_combine(self, other, np.subtract, "sub"), (self, other), "sub")
        if out.requires_grad:
            a, b = self, other

            def _bw():
                g = out.grad
                if a.requires_grad:
                    _accum(a, _unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(-g, b.data.shape))

            out._backward = _bw
        return out

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __truediv__(self, other):
        other = as_tensor(other)
        out = _make(_combine(self, other, np.divide, "div"), (self, other), "div")
        if out.requires_grad:
            a, b = self, other

            def _bw():
                g = out.grad
                if a.requires_grad:
                    _accum(a, _unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

            out._backward = _bw
        return out

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __neg__(self):
        out = _make(-self.data, (self,), "neg")
        if out.requires_grad:
            a = self

            def _bw():
                _accum(a, -out.grad)

            out._backward = _bw
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ShapeMismatch("pow exponent must be a python scalar")
        out = _make(self.data ** p, (self,), "pow")
        if out.requires_grad:
            a = self

            def _bw():
                _accum(a, out.grad * p * a.data ** (p - 1))

            out._backward = _bw
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self) -> "Tensor":
        out = _make(np.exp(self.data), (self,), "exp")
        if out.requires_grad:
            a = self

            def _bw():
                _accum(a, out.grad * out.data)

            out._backward = _bw
        return out

    def log(self) -> "Tensor":
        out = _make(np.log(self.data), (self,), "log")
        if out.requires_grad:
            a = self

            def _bw():
                _accum(a, out.grad / a.data)

            out._backward = _bw
        return out

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), "sum")
        if out.requires_grad:
            a = self
            shape = self.data.shape

            def _bw():
                _accum(a, _spread(out.grad, shape, axis, keepdims))

            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        out = _make(np.asarray(self.data.mean(axis=axis, keepdims=keepdims)), (self,), "mean")
        if out.requires_grad:
            a = self
            shape = self.data.shape

            def _bw():
                _accum(a, _spread(out.grad, shape, axis, keepdims) / count)

            out._backward = _bw
        return out

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            a = self
            old = self.data.shape

            def _bw():
                _accum(a, out.grad.reshape(old))

            out._backward = _bw
        return out

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeMismatch(f"transpose expects a rank-2 tensor, got shape {self.data.shape}")
        out = _make(self.data.T, (self,), "transpose")
        if out.requires_grad:
            a = self

            def _bw():
                _accum(a, out.grad.T)

            out._backward = _bw
        return out

    def __getitem__(self, key) -> "Tensor":
        out = _make(np.array(self.data[key]), (self,), "getitem")
        if out.requires_grad:
            a = self

            def _bw():
                buf = np.zeros_like(a.data)
                np.add.at(buf, key, out.grad)
                _accum(a, buf)

            out._backward = _bw
        return out


# -- helpers ------------------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def zeros_like(t: Tensor, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros_like(t.data), requires_grad=requires_grad)


def _make(data: np.ndarray, prev: tuple, op: str) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    out.grad = None
    req = _GRAD_ENABLED and any(p.requires_grad for p in prev)
    out.requires_grad = req
    out._prev = tuple(prev) if req else ()
    out._backward = None
    return out


def _accum(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _combine(a: Tensor, b: Tensor, fn, opname: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as e:
        raise ShapeMismatch(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from e


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _spread(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g, shape)
    ax = axis if isinstance(axis, tuple) else (axis,)
    ax = tuple(a % len(shape) for a in ax)
    if not keepdims:
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _axis_count(shape: tuple[int, ...], axis) -> int:
    ax = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for a in ax:
        n *= shape[a % len(shape)]
    return n


def toposort(root: Tensor) -> list[Tensor]:
    """Children-before-parents ordering of the graph below ``root`` (iterative)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- module-level operations ------------------------------------------------


def broadcast_binary(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise {add,mul,sub} under trailing-dimension broadcasting."""
    if op == "add":
        return as_tensor(a) + b
    if op == "mul":
        return as_tensor(a) * b
    if op == "sub":
        return as_tensor(a) - b
    raise ValueError(f"unknown broadcast op {op!r}")


def matmul(a, b) -> Tensor:
    """Matrix product for rank-1/rank-2 operands (dot, matvec, vecmat, matmat)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if not (1 <= ad.ndim <= 2 and 1 <= bd.ndim <= 2):
        raise ShapeMismatch(f"matmul expects rank 1 or 2 operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeMismatch(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    out = _make(ad @ bd, (a, b), "matmul")
    if out.requires_grad:
        na, nb = ad.ndim, bd.ndim

        def _bw():
            g = out.grad
            if na == 2 and nb == 2:
                if a.requires_grad:
                    _accum(a, g @ bd.T)
                if b.requires_grad:
                    _accum(b, ad.T @ g)
            elif na == 2 and nb == 1:
                if a.requires_grad:
                    _accum(a, np.outer(g, bd))
                if b.requires_grad:
                    _accum(b, ad.T @ g)
            elif na == 1 and nb == 2:
                if a.requires_grad:
                    _accum(a, bd @ g)
                if b.requires_grad:
                    _accum(b, np.outer(ad, g))
            else:
                if a.requires_grad:
                    _accum(a, g * bd)
                if b.requires_grad:
                    _accum(b, g * ad)

        out._backward = _bw
    return out


def concat(parts, axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree."""
    ts = [as_tensor(p) for p in parts]
    if not ts:
        raise ShapeMismatch("concat of empty list")
    nd = ts[0].data.ndim
    if nd == 0 or not -nd <= axis < nd:
        raise BadAxis(f"axis {axis} out of range for rank {nd}")
    ax = axis % nd
    base = ts[0].data.shape
    for t in ts[1:]:
        if t.data.ndim != nd or any(
            i != ax and t.data.shape[i] != base[i] for i in range(nd)
        ):
            raise ShapeMismatch(
                f"concat: shape {t.data.shape} incompatible with {base} on axis {ax}"
            )
    out = _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[ax] for t in ts]

        def _bw():
            pos = 0
            for t, s in zip(ts, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * nd
                    sl[ax] = slice(pos, pos + s)
                    _accum(t, out.grad[tuple(sl)])
                pos += s

        out._backward = _bw
    return out


def split(t: Tensor, axis: int, sizes) -> list[Tensor]:
    """Inverse of concat: cut ``t`` along ``axis`` into pieces of the given sizes."""
    t = as_tensor(t)
    nd = t.data.ndim
    if nd == 0 or not -nd <= axis < nd:
        raise BadAxis(f"axis {axis} out of range for rank {nd}")
    ax = axis % nd
    sizes = list(sizes)
    if any(s < 1 for s in sizes) or sum(sizes) != t.data.shape[ax]:
        raise ShapeMismatch(
            f"split sizes {sizes} do not partition extent {t.data.shape[ax]}"
        )
    outs: list[Tensor] = []
    pos = 0
    for s in sizes:
        sl = tuple(slice(pos, pos + s) if i == ax else slice(None) for i in range(nd))
        piece = _make(np.array(t.data[sl]), (t,), "split")
        if piece.requires_grad:

            def _bw(piece=piece, sl=sl):
                buf = np.zeros_like(t.data)
                buf[sl] = piece.grad
                _accum(t, buf)

            piece._backward = _bw
        outs.append(piece)
        pos += s
    return outs
