"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least
one input is tracked (a leaf created with ``requires_grad=True`` or the
output of a recorded operation).  Outside a tape every operation is plain
numpy arithmetic, which is how inference runs without paying for the graph.

    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    with Tape():
        loss = (w @ x).tanh().sum()
    grads = backward(loss)          # {w: ndarray}
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ACTIVATIONS",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "activation",
    "apply_op",
    "as_tensor",
    "backward",
    "clip",
    "concatenate",
    "conv2d",
    "conv2d_transpose",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "no_grad",
    "outer",
    "permute",
    "relu",
    "reshape",
    "roll_axis",
    "roll_axis_last",
    "sigmoid",
    "softmax",
    "swap_last",
    "take",
    "tanh",
    "tensordot",
    "where",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("grad", "index", "parents", "shape", "vjp")

    def __init__(self, index, parents, vjp, shape):
        self.index = index
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.shape = shape


class Tape:
    """Append-only record of primitive operations for one forward pass.

    Nodes are appended in execution order, so parents always precede their
    children and a reverse sweep visits each node once.  The tape is cleared
    by :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def _record(self, parents, vjp, shape) -> _Node:
        node = _Node(len(self.nodes), parents, vjp, shape)
        self.nodes.append(node)
        return node


class no_grad:
    """Context manager that suspends recording (pushes an empty tape slot)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    """A float64 array plus optional gradient-tracking metadata."""

    __array_priority__ = 1000
    __slots__ = ("_node", "_tape", "data", "grad", "meta", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._tape = None
        self.meta = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._node is not None

    @property
    def T(self) -> Tensor:
        return permute(self, tuple(reversed(range(self.ndim))))

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators ----------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- method forms -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` as a tensor and record it on the active tape if needed.

    ``vjp(g)`` must return one gradient (or ``None``) per parent, each shaped
    like that parent.  This is the extension point for custom primitives.
    """
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("operation produced NaN or Inf")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = False
    t.grad = None
    t._node = None
    t._tape = None
    t.meta = None
    tape = _active_tape()
    if tape is not None and any(p.tracked for p in parents):
        t._node = tape._record(tuple(parents), vjp, out.shape)
        t._tape = tape
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Reverse sweep from a tracked scalar.

    Returns a map from every tracked leaf reached to its gradient; leaves
    passed in ``params`` that the loss does not depend on map to zeros.
    Gradients are also stored on ``leaf.grad``.  The tape is cleared.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.tracked:
        raise ValueError("loss is not tracked; build it inside a Tape from tracked leaves")
    leaf_grads: dict[int, list] = {}
    if loss._node is None:
        leaf_grads[id(loss)] = [loss, np.ones_like(loss.data)]
    else:
        tape = loss._tape
        nodes = tape.nodes
        loss._node.grad = np.ones(loss._node.shape)
        for node in reversed(nodes[: loss._node.index + 1]):
            if node.grad is None:
                continue
            grads = node.vjp(node.grad)
            for p, g in zip(node.parents, grads):
                if g is None:
                    continue
                if p._node is not None:
                    if p._node.grad is None:
                        p._node.grad = np.array(g, dtype=np.float64)
                    else:
                        p._node.grad = p._node.grad + g
                elif p.requires_grad:
                    slot = leaf_grads.get(id(p))
                    if slot is None:
                        leaf_grads[id(p)] = [p, np.array(g, dtype=np.float64)]
                    else:
                        slot[1] = slot[1] + g
            node.grad = None
        tape.nodes.clear()
    result = {}
    for leaf, g in leaf_grads.values():
        leaf.grad = g
        result[leaf] = g
    if params is not None:
        for p in params:
            if p not in result:
                p.grad = np.zeros_like(p.data)
                result[p] = p.grad
    return result


# Tensor hashing is by identity so it can key gradient maps.
Tensor.__hash__ = object.__hash__
Tensor.__eq__ = object.__eq__


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return apply_op(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return apply_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return apply_op(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return apply_op(out, (a,), lambda g: (g / ad,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return apply_op(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def roll_axis(w, axis: int) -> Tensor:
    """Move ``axis`` to the front, keeping the other axes in order."""
    w = as_tensor(w)
    if not 0 <= axis < w.ndim:
        raise ValueError(f"axis {axis} out of range for rank {w.ndim}")
    rest = [i for i in range(w.ndim) if i != axis]
    return permute(w, [axis] + rest)


def roll_axis_last(w, axis: int) -> Tensor:
    """Move ``axis`` to the back, keeping the other axes in order."""
    w = as_tensor(w)
    if not 0 <= axis < w.ndim:
        raise ValueError(f"axis {axis} out of range for rank {w.ndim}")
    rest = [i for i in range(w.ndim) if i != axis]
    return permute(w, rest + [axis])


def swap_last(a) -> Tensor:
    """Transpose the two trailing axes (batched matrix transpose)."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def take(a, idx) -> Tensor:
    """Indexing / gather.  Repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return apply_op(a.data[idx], (a,), vjp)


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ValueError("matmul needs operands of rank >= 1")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def vjp(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bd.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return apply_op(out, (a, b), vjp)


def tensordot(a, b, ndims: int) -> Tensor:
    """Contract the trailing ``ndims`` axes of ``a`` with the leading ones of ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ndims > min(ad.ndim, bd.ndim) or ad.shape[ad.ndim - ndims :] != bd.shape[:ndims]:
        raise ValueError(f"tensordot extents disagree: {ad.shape} vs {bd.shape} over {ndims} axes")
    # flattened to one matrix product; np.tensordot does the same with more bookkeeping
    free_a, free_b = ad.shape[: ad.ndim - ndims], bd.shape[ndims:]
    k = int(np.prod(bd.shape[:ndims]))
    a2, b2 = ad.reshape(-1, k), bd.reshape(k, -1)
    out = (a2 @ b2).reshape(free_a + free_b)

    def vjp(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(ad.shape), (a2.T @ g2).reshape(bd.shape)

    return apply_op(out, (a, b), vjp)


def outer(a, b) -> Tensor:
    """Outer product; result shape is ``a.shape + b.shape``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = np.multiply.outer(ad, bd)

    def vjp(g):
        ga = np.tensordot(g, bd, axes=(list(range(ad.ndim, g.ndim)), list(range(bd.ndim))))
        gb = np.tensordot(ad, g, axes=(list(range(ad.ndim)), list(range(ad.ndim))))
        return ga, gb

    return apply_op(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# convolution (valid padding, cross-correlation, square stride)
# ---------------------------------------------------------------------------
def _out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _cols(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # x: (B, C, H, W) -> (B*H'*W', C*kh*kw)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw), ho, wo


def _conv_fwd(x, w, stride):
    b = x.shape[0]
    o, c, kh, kw = w.shape
    cols, ho, wo = _cols(x, kh, kw, stride)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)


def _conv_adj(y, w, stride, hw):
    b, o, ho, wo = y.shape
    _, c, kh, kw = w.shape
    h, wid = hw
    cols = y.transpose(0, 2, 3, 1).reshape(b * ho * wo, o) @ w.reshape(o, -1)
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    x = np.zeros((b, c, h, wid))
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            x[:, :, i : i + span_h : stride, j : j + span_w : stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return x


def _conv_wgrad(x, gy, w_shape, stride):
    o, c, kh, kw = w_shape
    cols, _, _ = _cols(x, kh, kw, stride)
    g = gy.transpose(0, 2, 3, 1).reshape(-1, o)
    return (g.T @ cols).reshape(w_shape)


def _batched(x: np.ndarray):
    return (x[None], True) if x.ndim == 3 else (x, False)


def conv2d(x, w, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x`` (C,H,W or B,C,H,W) with filters ``w`` (O,C,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    xd, single = _batched(x.data)
    wd = w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, filters {w.shape}")
    if wd.shape[2] > xd.shape[2] or wd.shape[3] > xd.shape[3]:
        raise ValueError(f"kernel {wd.shape[2:]} larger than input {xd.shape[2:]}")
    out = _conv_fwd(xd, wd, stride)
    hw = xd.shape[2:]

    def vjp(g):
        g4 = g[None] if single else g
        gx = _conv_adj(g4, wd, stride, hw)
        gw = _conv_wgrad(xd, g4, wd.shape, stride)
        return (gx[0] if single else gx), gw

    return apply_op(out[0] if single else out, (x, w), vjp)


def conv2d_transpose(y, w, stride: int, out_shape) -> Tensor:
    """Adjoint of :func:`conv2d` in its input, using the same filters.

    ``out_shape`` is the spatial (H, W) of the input that conv2d would take,
    or a full (C, H, W) shape.
    """
    y, w = as_tensor(y), as_tensor(w)
    yd, single = _batched(y.data)
    wd = w.data
    hw = tuple(out_shape[-2:])
    if len(out_shape) >= 3 and out_shape[-3] != wd.shape[1]:
        raise ValueError(f"out_shape {out_shape} disagrees with filter channels {wd.shape[1]}")
    if yd.shape[1] != wd.shape[0]:
        raise ValueError(f"conv2d_transpose shape mismatch: {y.shape} vs filters {w.shape}")
    expected = (_out_size(hw[0], wd.shape[2], stride), _out_size(hw[1], wd.shape[3], stride))
    if expected != yd.shape[2:]:
        raise ValueError(f"out_shape {out_shape} inconsistent with map {yd.shape[2:]} (stride {stride})")
    out = _conv_adj(yd, wd, stride, hw)

    def vjp(g):
        g4 = g[None] if single else g
        gy = _conv_fwd(g4, wd, stride)
        gw = _conv_wgrad(g4, yd, wd.shape, stride)
        return (gy[0] if single else gy), gw

    return apply_op(out[0] if single else out, (y, w), vjp)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------
def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return apply_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return apply_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return apply_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return apply_op(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return apply_op(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS = {
    "identity": identity,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
}


def activation(kind: str, t, axis: int = -1) -> Tensor:
    """Apply a named activation; softmax normalizes along ``axis``."""
    if kind == "softmax":
        return softmax(t, axis=axis)
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(t)
