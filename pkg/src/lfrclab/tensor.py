"""A small reverse-mode automatic differentiation engine on top of numpy.

Every differentiable operation is a function taking :class:`Tensor` inputs and
returning a new :class:`Tensor` that remembers its parents and a closure
computing the vector-Jacobian product.  Calling :func:`backward` on a scalar
walks the recorded graph in reverse topological order and accumulates
gradients into every leaf with ``requires_grad=True``.

Only the operations needed for small classifiers, attacks and the relation
consistency loss are provided.  Broadcasting is limited to adding a bias over
the leading (batch) dimension; every other shape mismatch raises
:class:`~lfrclab.errors.DimensionError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError

__all__ = [
    "Tensor",
    "as_tensor",
    "default_dtype",
    "set_default_dtype",
    "no_grad",
    "grad_enabled",
    "topological_order",
    "backward",
    "grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "exp",
    "absolute",
    "square",
    "sum",
    "mean",
    "reshape",
    "flatten",
    "transpose",
    "astype",
    "conv2d",
    "avg_pool2d",
    "softmax_cross_entropy",
    "finite_difference_grad",
]

_state = threading.local()
_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Set the float width used when tensors are built from Python data."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype.kind != "f":
        raise InputError(f"default dtype must be floating point, got {dtype}")
    _default_dtype = dtype


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (for evaluation passes)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """Dense n-dimensional array with an optional gradient slot.

    ``data`` is a numpy array (row-major).  Tensors are treated as immutable
    once created; only ``grad`` changes, during :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward_fn, op) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise InputError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op!r})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise DimensionError("division is only supported by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum(self)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def abs(self) -> "Tensor":
        return absolute(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root``, every node after all of its parents."""
    order, seen = [], set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _propagate(root: Tensor, targets=None) -> dict:
    if root.data.size != 1:
        raise InputError(f"backward needs a scalar loss, got shape {root.shape}")
    order = topological_order(root)
    if targets is None:
        relevant = {id(n) for n in order if n.requires_grad}
    else:
        relevant = {id(t) for t in targets}
        for node in order:
            if any(id(p) in relevant for p in node._parents):
                relevant.add(id(node))
    wanted = None if targets is None else {id(t) for t in targets}

    pending = {id(root): np.ones_like(root.data)}
    collected = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None or id(node) not in relevant:
            continue
        if wanted is None:
            if node.is_leaf:
                collected[id(node)] = (node, g)
        elif id(node) in wanted:
            collected[id(node)] = (node, g)
        if node.is_leaf:
            continue
        needs = tuple(id(p) in relevant for p in node._parents)
        parent_grads = node._backward(g, needs)
        for parent, need, pg in zip(node._parents, needs, parent_grads):
            if not need or pg is None:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return collected


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    for node, g in _propagate(loss).values():
        if node.grad is None:
            node.grad = np.array(g, dtype=node.data.dtype)
        else:
            node.grad = node.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list:
    """Gradients of ``loss`` with respect to ``wrt`` without touching ``.grad``.

    Only the part of the graph leading to ``wrt`` is differentiated, so asking
    for an input gradient skips the (relatively expensive) weight gradients.
    Unreachable targets get a zero array.
    """
    wrt = list(wrt)
    collected = _propagate(loss, wrt)
    out = []
    for t in wrt:
        hit = collected.get(id(t))
        out.append(np.zeros_like(t.data) if hit is None else np.asarray(hit[1], dtype=t.data.dtype))
    return out


# ---------------------------------------------------------------------------
# elementwise and structural operations


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return Tensor._from_op(ad @ bd, (a, b), _bw, "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias of shape ``a.shape[1:]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def _bw(g, needs):
            return g, g
    elif b.ndim == a.ndim - 1 and b.shape == a.shape[1:]:
        def _bw(g, needs):
            return g, (g.sum(axis=0) if needs[1] else None)
    elif a.ndim == b.ndim - 1 and a.shape == b.shape[1:]:
        def _bw(g, needs):
            return (g.sum(axis=0) if needs[0] else None), g
    else:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._from_op(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def _bw(g, needs):
        return g, (-g if needs[1] else None)

    return Tensor._from_op(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors, or tensor times scalar."""
    if np.isscalar(a) and not isinstance(a, Tensor):
        return scale(b, a)
    if np.isscalar(b) and not isinstance(b, Tensor):
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def _bw(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return Tensor._from_op(ad * bd, (a, b), _bw, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def _bw(g, needs):
        return (g * c,)

    return Tensor._from_op(a.data * a.data.dtype.type(c), (a,), _bw, "scale")


def relu(x) -> Tensor:
    # derivative at exactly 0 is 0
    x = as_tensor(x)
    mask = x.data > 0

    def _bw(g, needs):
        return (g * mask,)

    return Tensor._from_op(x.data * mask, (x,), _bw, "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def _bw(g, needs):
        return (g * out,)

    return Tensor._from_op(out, (x,), _bw, "exp")


def absolute(x) -> Tensor:
    # derivative at exactly 0 is 0 (np.sign(0) == 0)
    x = as_tensor(x)
    s = np.sign(x.data)

    def _bw(g, needs):
        return (g * s,)

    return Tensor._from_op(np.abs(x.data), (x,), _bw, "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def _bw(g, needs):
        return (2 * g * xd,)

    return Tensor._from_op(xd * xd, (x,), _bw, "square")


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def _bw(g, needs):
        return (np.full(shape, g, dtype=dtype),)

    return Tensor._from_op(np.asarray(x.data.sum(), dtype=dtype), (x,), _bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    if axis is None:
        count = x.size

        def _bw(g, needs):
            return (np.full(shape, g / count, dtype=dtype),)

        return Tensor._from_op(np.asarray(x.data.mean(), dtype=dtype), (x,), _bw, "mean")

    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([shape[a] for a in axes]))

    def _bw(g, needs):
        return (np.broadcast_to(np.expand_dims(g / count, axes), shape).astype(dtype),)

    return Tensor._from_op(x.data.mean(axis=axes), (x,), _bw, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc

    def _bw(g, needs):
        return (g.reshape(old),)

    return Tensor._from_op(out, (x,), _bw, "reshape")


def flatten(x) -> Tensor:
    """Collapse every dimension after the first."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def _bw(g, needs):
        return (g.T,)

    return Tensor._from_op(x.data.T, (x,), _bw, "transpose")


def astype(x, dtype) -> Tensor:
    x = as_tensor(x)
    src = x.dtype
    dtype = np.dtype(dtype)
    if dtype == src:
        return x

    def _bw(g, needs):
        return (g.astype(src),)

    return Tensor._from_op(x.data.astype(dtype), (x,), _bw, "astype")


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW layout)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``B x C x H x W`` and ``weight`` is ``O x C x kh x kw``; the
    optional ``bias`` has shape ``(O,)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = weight.shape
    if C != Ck:
        raise DimensionError(f"conv2d: input has {C} channels but kernel {weight.shape} expects {Ck}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride {stride} / padding {padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # columns laid out (C*kh*kw, B*Ho*Wo) so the spatial axes stay innermost
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * Ho * Wo)
    wmat = weight.data.reshape(O, C * kh * kw)
    out2d = wmat @ cols
    if bias is not None:
        out2d += bias.data[:, None]
    out = np.ascontiguousarray(out2d.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))
    dtype = x.dtype

    def _bw(g, needs):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gx = gw = gb = None
        if needs[0]:
            gcols = (wmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((C, B, Hp, Wp), dtype=dtype)
            h_end, w_end = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h_end:stride, j:j + w_end:stride] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3))
        if needs[1]:
            gw = (g2 @ cols.T).reshape(O, C, kh, kw)
        if bias is not None and needs[2]:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _bw, "conv2d")


def avg_pool2d(x, window: int) -> Tensor:
    """Non-overlapping mean pooling over ``window x window`` tiles."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    k = int(window)
    if k < 1 or H % k or W % k:
        raise DimensionError(f"avg_pool2d: window {k} does not tile spatial size {H}x{W}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)

    def _bw(g, needs):
        return (np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3).astype(x.dtype, copy=False),)

    return Tensor._from_op(out, (x,), _bw, "avg_pool2d")


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross entropy expects B x k logits, got {logits.shape}")
    B, k = logits.shape
    y = np.asarray(labels)
    if y.shape != (B,):
        raise DimensionError(f"cross entropy: {B} logits rows but labels of shape {y.shape}")
    if y.dtype.kind not in "iu" or (B and (y.min() < 0 or y.max() >= k)):
        raise InputError(f"cross entropy: labels must be integers in [0, {k})")
    rows = np.arange(B)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.asarray((lse - z[rows, y]).mean(), dtype=logits.dtype)

    def _bw(g, needs):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1
        return (p * (g / B),)

    return Tensor._from_op(loss, (logits,), _bw, "cross_entropy")


# ---------------------------------------------------------------------------
# test oracle


def finite_difference_grad(f: Callable, x, h=None) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``f`` receives a :class:`Tensor` and returns a scalar (float or Tensor).
    ``h`` is either a positive step or ``None`` for the coordinate-scaled step
    ``1e-5 * (1 + |x_i|)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64 if not isinstance(x, Tensor) else x.dtype)
    if h is not None and h <= 0:
        raise InputError("finite difference step must be positive")

    def _eval(arr):
        val = f(Tensor(arr, dtype=arr.dtype))
        return val.item() if isinstance(val, Tensor) else float(val)

    out = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    out_flat = out.reshape(-1)
    for i in range(flat.size):
        step = h if h is not None else 1e-5 * (1.0 + abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        up = _eval(base.copy())
        flat[i] = orig - step
        down = _eval(base.copy())
        flat[i] = orig
        out_flat[i] = (up - down) / (2 * step)
    return out
