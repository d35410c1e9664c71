"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional graph node recording how it
was produced.  Every primitive expresses its vector-Jacobian products as
compositions of the same primitives, so a gradient returned by
``backward(..., create_graph=True)`` is itself a differentiable expression
and gradients-of-gradients come out of the ordinary machinery.

Design rules enforced throughout:

* tensors are rank 0..4, float32 or float64;
* no primitive ever mutates an input array (value semantics);
* any primitive producing a non-finite value raises ``NonFiniteError``
  naming the op and summarising its inputs;
* each op keeps one VJP closure per *tracked* parent, so constant branches
  are never differentiated.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "DetachedInputWarning",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "pow_scalar",
    "maximum_scalar",
    "sqrt",
    "sigmoid",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "narrow",
    "pad",
    "matmul",
    "zeros",
    "ones",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when an op receives tensors of incompatible or invalid shape."""


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or infinity."""


class GraphError(RuntimeError):
    """Raised on invalid use of the autodiff graph (non-scalar backward etc.)."""


class DetachedInputWarning(UserWarning):
    """Emitted when a gradient is requested w.r.t. a detached tensor."""


_state = threading.local()


def grad_enabled() -> bool:
    """Whether newly created ops are being recorded on the graph."""
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording within its body."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class _enable_grad:
    # internal: backward(create_graph=True) must record even inside no_grad
    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = True
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


# Monotone creation counter.  A node's parents always carry smaller numbers,
# so descending order is a valid reverse-topological order.
_SEQ = itertools.count()


class Node:
    """Graph record: op name, tracked parents, and one VJP per parent."""

    __slots__ = ("name", "parents", "vjps", "seq")

    def __init__(self, name: str, parents: tuple, vjps: tuple):
        self.name = name
        self.parents = parents
        self.vjps = vjps
        self.seq = next(_SEQ)


class Tensor:
    """Immutable-by-convention ndarray wrapper participating in autodiff.

    Parameters
    ----------
    data : array-like
        Values; anything ``np.asarray`` accepts.  Non-float dtypes are cast
        to float32; float32/float64 are kept.
    dtype : optional
        Explicit dtype, must be float32 or float64.
    requires_grad : bool
        Mark this tensor as a graph leaf so ``backward`` can return its
        gradient.
    """

    __slots__ = ("data", "node")

    # make numpy defer binary ops to our __r*__ methods
    __array_ufunc__ = None

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            dt = np.dtype(dtype)
            if dt not in _FLOAT_DTYPES:
                raise TypeError(f"tensor dtype must be float32 or float64, got {dt}")
            arr = arr.astype(dt, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > _MAX_RANK:
            raise ShapeError(f"tensors are rank 0..{_MAX_RANK}, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed from non-finite data")
        self.data = arr
        self.node = Node("leaf", (), ()) if requires_grad else None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: op outputs are pre-validated, skip __init__ checks
        t = object.__new__(cls)
        t.data = arr
        t.node = None
        return t

    # -- inspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Copy of the underlying values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, disconnected from the graph.  Shares storage."""
        return Tensor._wrap(self.data)

    def astype(self, dtype, requires_grad: bool = False) -> "Tensor":
        """Cast to a new float dtype.  Graph-breaking: the result is a fresh
        leaf (or constant), never connected to this tensor's history."""
        return Tensor(self.data, dtype=dtype, requires_grad=requires_grad)

    def __repr__(self) -> str:
        op = self.node.name if self.node is not None else None
        flag = f", op={op!r}" if op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

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

    def __abs__(self):
        return absolute(self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands of a binary op.  Scalars adopt the tensor's dtype so
    mixing python floats into a float32 graph does not promote it."""
    a_is = isinstance(a, Tensor)
    b_is = isinstance(b, Tensor)
    if a_is and b_is:
        return a, b
    if a_is:
        return a, _scalar_like(b, a.dtype)
    if b_is:
        return _scalar_like(a, b.dtype), b
    return _as_tensor(a), _as_tensor(b)


def _scalar_like(x, dtype) -> Tensor:
    arr = np.asarray(x)
    if arr.ndim == 0:
        return Tensor(arr, dtype=dtype)
    return Tensor(arr)


def _input_stats(parents: Sequence[Tensor]) -> str:
    parts = []
    for i, p in enumerate(parents):
        d = p.data
        if d.size == 0:
            parts.append(f"input{i}: shape={d.shape} empty")
            continue
        parts.append(
            f"input{i}: shape={d.shape} min={np.nanmin(d):.6g} max={np.nanmax(d):.6g}"
            f" nonfinite={int(np.count_nonzero(~np.isfinite(d)))}"
        )
    return "; ".join(parts)


def _op(name: str, out: np.ndarray, parents: Sequence[Tensor], vjps: Sequence) -> Tensor:
    """Finalize a primitive: validate the output, attach a node if tracking."""
    if not np.isfinite(out).all():
        raise NonFiniteError(f"op '{name}' produced a non-finite value ({_input_stats(parents)})")
    t = Tensor._wrap(out)
    if grad_enabled():
        tracked = [(p, v) for p, v in zip(parents, vjps) if p.node is not None and v is not None]
        if tracked:
            t.node = Node(name, tuple(p for p, _ in tracked), tuple(v for _, v in tracked))
    return t


# ---------------------------------------------------------------------------
# broadcasting helper


def _sum_to(t: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to the original operand shape."""
    if t.shape == tuple(shape):
        return t
    lead = t.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and t.shape[lead + i] != 1
    )
    reduced = sum(t, axis=axes, keepdims=True) if axes else t
    return reshape(reduced, shape)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    ash, bsh = a.shape, b.shape
    return _op(
        "add",
        out,
        (a, b),
        (lambda g: _sum_to(g, ash), lambda g: _sum_to(g, bsh)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    ash, bsh = a.shape, b.shape
    return _op(
        "sub",
        out,
        (a, b),
        (lambda g: _sum_to(g, ash), lambda g: _sum_to(neg(g), bsh)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    ash, bsh = a.shape, b.shape
    return _op(
        "mul",
        out,
        (a, b),
        (lambda g: _sum_to(mul(g, b), ash), lambda g: _sum_to(mul(g, a), bsh)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    ash, bsh = a.shape, b.shape

    def vjp_a(g):
        return _sum_to(div(g, b), ash)

    def vjp_b(g):
        return _sum_to(neg(div(mul(g, a), mul(b, b))), bsh)

    return _op("div", out, (a, b), (vjp_a, vjp_b))


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _op("neg", -a.data, (a,), (lambda g: neg(g),))


def absolute(a) -> Tensor:
    """Elementwise |a|.  Subgradient at 0 is 0 (sign(0) == 0)."""
    a = _as_tensor(a)
    sign = Tensor._wrap(np.sign(a.data))
    return _op("abs", np.abs(a.data), (a,), (lambda g: mul(g, sign),))


def pow_scalar(a, exponent: float) -> Tensor:
    """Elementwise a ** exponent for a python-scalar exponent."""
    a = _as_tensor(a)
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**p

    def vjp(g):
        return mul(g, mul(pow_scalar(a, p - 1.0), p))

    return _op("pow_scalar", out, (a,), (vjp,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    result_box = []

    def vjp(g):
        return div(mul(g, 0.5), result_box[0])

    t = _op("sqrt", out, (a,), (vjp,))
    result_box.append(t)
    return t


def maximum_scalar(a, floor: float) -> Tensor:
    """Elementwise max(a, floor).  Gradient is 0 where a <= floor."""
    a = _as_tensor(a)
    c = float(floor)
    mask = Tensor._wrap((a.data > c).astype(a.dtype))
    return _op("maximum_scalar", np.maximum(a.data, c), (a,), (lambda g: mul(g, mask),))


def sigmoid(a) -> Tensor:
    """Numerically stable logistic; output clipped into the open (0, 1)."""
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(x.dtype)
    np.clip(out, info.tiny, np.nextafter(x.dtype.type(1.0), x.dtype.type(0.0)), out=out)
    result_box = []

    def vjp(g):
        y = result_box[0]
        return mul(g, mul(y, sub(1.0, y)))

    t = _op("sigmoid", out, (a,), (vjp,))
    result_box.append(t)
    return t


# ---------------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (int(axis),)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def vjp(g):
        if a.ndim == 0:
            return reshape(g, ())
        if axis is None:
            kept = (1,) * a.ndim
        elif keepdims:
            kept = g.shape
        else:
            norm = tuple(ax % a.ndim for ax in axis)
            kept = tuple(1 if i in norm else s for i, s in enumerate(ash))
        return broadcast_to(reshape(g, kept), ash)

    return _op("sum", out, (a,), (vjp,))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    out = a.data.reshape(shape)
    ash = a.shape
    return _op("reshape", out, (a,), (lambda g: reshape(g, ash),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation for shape {a.shape}")
    inv = tuple(int(i) for i in np.argsort(axes))
    return _op("transpose", a.data.transpose(axes), (a,), (lambda g: transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = np.broadcast_to(a.data, shape).copy()
    ash = a.shape
    return _op("broadcast_to", out, (a,), (lambda g: _sum_to(g, ash),))


def concat(tensors: Iterable, axis: int) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeError("concat inputs must share rank")
        if p.shape[:ax] + p.shape[ax + 1 :] != parts[0].shape[:ax] + parts[0].shape[ax + 1 :]:
            raise ShapeError(
                f"concat inputs differ off axis {ax}: {parts[0].shape} vs {p.shape}"
            )
    out = np.concatenate([p.data for p in parts], axis=ax)

    vjps = []
    start = 0
    for p in parts:
        length = p.shape[ax]
        vjps.append(lambda g, s=start, l=length: narrow(g, ax, s, l))
        start += length
    return _op("concat", out, parts, tuple(vjps))


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` elements along one axis."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    if start < 0 or length < 0 or start + length > a.shape[ax]:
        raise ShapeError(
            f"narrow(start={start}, length={length}) out of range for axis {ax} of {a.shape}"
        )
    idx = tuple(slice(None) if i != ax else slice(start, start + length) for i in range(a.ndim))
    out = a.data[idx].copy()
    before, after = start, a.shape[ax] - start - length

    def vjp(g):
        pads = [(0, 0)] * a.ndim
        pads[ax] = (before, after)
        return pad(g, pads)

    return _op("narrow", out, (a,), (vjp,))


def pad(a, pads: Sequence) -> Tensor:
    """Zero-pad with (before, after) amounts per axis."""
    a = _as_tensor(a)
    pads = [(int(b), int(c)) for b, c in pads]
    if len(pads) != a.ndim:
        raise ShapeError(f"pad needs one (before, after) pair per axis, got {len(pads)} for rank {a.ndim}")
    out = np.pad(a.data, pads)
    ash = a.shape

    def vjp(g):
        r = g
        for ax, (b, _) in enumerate(pads):
            r = narrow(r, ax, b, ash[ax])
        return r

    return _op("pad", out, (a,), (vjp,))


# ---------------------------------------------------------------------------
# matmul


def _matmul_f64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Fixed-order accumulation: out accumulates rank-1 products for k = 0..K-1
    # sequentially, so the reduction order matches a naive triple loop exactly.
    # BLAS would be faster but reorders the sum.
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matmul(a, b) -> Tensor:
    """2-D matrix product.  float64 inputs use a fixed-order accumulation."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul takes 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.dtype == np.float64 or b.dtype == np.float64:
        out = _matmul_f64(a.data.astype(np.float64, copy=False), b.data.astype(np.float64, copy=False))
    else:
        out = a.data @ b.data

    def vjp_a(g):
        return matmul(g, transpose(b, (1, 0)))

    def vjp_b(g):
        return matmul(transpose(a, (1, 0)), g)

    return _op("matmul", out, (a, b), (vjp_a, vjp_b))


# ---------------------------------------------------------------------------
# constructors


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# backward


def backward(output: Tensor, wrt, create_graph: bool = False):
    """Gradients of a scalar `output` w.r.t. each tensor in `wrt`.

    Parameters
    ----------
    output : Tensor
        Single-element tensor at the head of the graph.
    wrt : Tensor or sequence of Tensor
        Tensors to differentiate with respect to.  A detached tensor yields
        a zero gradient plus a ``DetachedInputWarning``; a tracked tensor
        the output does not depend on yields zeros silently.
    create_graph : bool
        When True the returned gradients are themselves graph expressions,
        differentiable w.r.t. anything upstream.  When False they are
        constants.

    Returns
    -------
    Tensor or list of Tensor, matching the structure of `wrt`.
    """
    single = isinstance(wrt, Tensor)
    targets: list[Tensor] = [wrt] if single else list(wrt)
    if output.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")

    for t in targets:
        if t.node is None:
            warnings.warn(
                "gradient requested w.r.t. a detached tensor; returning zeros",
                DetachedInputWarning,
                stacklevel=2,
            )

    grads: dict[int, Tensor] = {}
    if output.node is not None:
        # collect the subgraph reachable from the output
        seen: dict[int, Node] = {}
        stack = [output.node]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            for p in node.parents:
                if p.node is not None and id(p.node) not in seen:
                    stack.append(p.node)
        order = sorted(seen.values(), key=lambda n: n.seq, reverse=True)

        keep = {id(t.node) for t in targets if t.node is not None}
        ctx = _enable_grad() if create_graph else no_grad()
        with ctx:
            seed = Tensor._wrap(np.ones(output.shape, dtype=output.dtype))
            grads[id(output.node)] = seed
            for node in order:
                g = grads.get(id(node))
                if g is None:
                    continue
                if id(node) not in keep:
                    del grads[id(node)]
                for p, vjp in zip(node.parents, node.vjps):
                    pg = vjp(g)
                    if pg.shape != p.shape:
                        raise GraphError(
                            f"vjp of '{node.name}' returned shape {pg.shape} for parent of shape {p.shape}"
                        )
                    prev = grads.get(id(p.node))
                    grads[id(p.node)] = pg if prev is None else add(prev, pg)

    results = []
    for t in targets:
        g = grads.get(id(t.node)) if t.node is not None else None
        if g is None:
            g = Tensor._wrap(np.zeros(t.shape, dtype=t.dtype))
        results.append(g)
    return results[0] if single else results
