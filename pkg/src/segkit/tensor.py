"""Dense tensors with a reverse-mode gradient tape.

Every tensor wraps a contiguous numpy buffer (float32 or float64).  Operations
whose inputs require gradients record a node on the output; ``backward`` sorts
those nodes into a :class:`Tape` and replays it in reverse, accumulating into
the ``grad`` buffers of leaf tensors.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
import struct
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.dtype("float32"), "f64": np.dtype("float64")}
DTYPE_NAMES = {v: k for k, v in DTYPES.items()}


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class LabelError(ValueError):
    """Raised when a label map holds a value outside the class range."""


class NonFiniteError(ValueError):
    """Raised when NaN or Inf shows up where finiteness is required."""


class _GradState(threading.local):
    def __init__(self) -> None:
        self.enabled = True
        self.debug = os.environ.get("SEGKIT_DEBUG", "") not in ("", "0")


_state = _GradState()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, optimizer updates)."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return _state.enabled


def set_debug(flag: bool) -> None:
    """When on, every operation asserts its output is finite."""
    _state.debug = bool(flag)


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return DTYPES["f64"]
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in DTYPE_NAMES:
        raise TypeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class _Node:
    __slots__ = ("parents", "backward", "op")

    def __init__(self, parents: tuple, backward: Callable, op: str):
        self.parents = parents
        self.backward = backward
        self.op = op


class Tensor:
    """N-dimensional array that can take part in gradient recording.

    Construction copies and validates the data: NaN or Inf raise
    :class:`NonFiniteError`.  Only leaf tensors (those not produced by a
    recorded operation) receive a populated ``grad`` after ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in DTYPE_NAMES:
            dt = data.dtype
        else:
            dt = resolve_dtype(dtype)
        arr = np.array(data, dtype=dt, copy=True, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor data contains NaN or Inf (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def validate(self) -> None:
        """Raise NonFiniteError if data (or grad) holds NaN/Inf."""
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {self.name or ''} {self.shape}")
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise NonFiniteError(f"non-finite gradient in tensor {self.name or ''} {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        dt = resolve_dtype(dtype)
        src = self

        def bw(g):
            return (g.astype(src.dtype),)

        return _make(self.data.astype(dt), (self,), bw, "astype")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={DTYPE_NAMES.get(self.dtype, self.dtype)}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor._wrap(arr)


def _make(arr: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if _state.debug and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"operation '{op}' produced NaN/Inf")
    needs = _state.enabled and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        out._node = _Node(parents, backward_fn, op)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(a.data[index])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis % (len(shape) + 1)
        shape.insert(ax, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def _max_keepdims(a: np.ndarray, axis: int) -> np.ndarray:
    # numpy's reduction is slow over short trailing axes; a halving tree of
    # elementwise maxima gives the same values several times faster there
    if axis not in (-1, a.ndim - 1) or a.shape[-1] > 64 or a.shape[-1] == 0:
        return a.max(axis=axis, keepdims=True)
    while a.shape[-1] > 1:
        n = a.shape[-1]
        half = n // 2
        m = np.maximum(a[..., :half], a[..., half : 2 * half])
        if n % 2:
            m[..., :1] = np.maximum(m[..., :1], a[..., -1:])
        a = m
    return a


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - _max_keepdims(x.data, axis)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - _max_keepdims(x.data, axis)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def bw(g):
        gw = unbroadcast(g * xhat, weight.shape)
        gb = unbroadcast(g, bias.shape)
        dxhat = g * weight.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Token-layout affine map: ``x[..., k] @ weight[k, n] + bias[n]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution of a channel-first map ``x[..., C_in, h, w]``.

    ``weight`` is ``[C_out, C_in]``; the result is ``[..., C_out, h, w]``.
    """
    if x.ndim < 3:
        raise ShapeError(f"pointwise_conv expects [..., C, h, w], got {x.shape}")
    c_out, c_in = weight.shape
    if x.shape[-3] != c_in:
        raise ShapeError(f"pointwise_conv channel mismatch: input has {x.shape[-3]}, weight expects {c_in}")
    lead, (h, w) = x.shape[:-3], x.shape[-2:]
    flat = reshape(x, lead + (c_in, h * w))
    y = matmul(weight, flat)
    if bias is not None:
        y = add(y, reshape(bias, (c_out, 1)))
    return reshape(y, lead + (c_out, h, w))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _bilinear_taps(n_in: int, n_out: int):
    """Half-pixel-centre source taps (i0, i1, frac) for one axis."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    frac[i0 == i1] = 0.0
    return i0, i1, frac


def _taps_matrix(i0, i1, frac, n_in: int) -> np.ndarray:
    m = np.zeros((len(i0), n_in))
    rows = np.arange(len(i0))
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with bilinear interpolation (align_corners=False).

    Interpolation is written as ``a + t * (b - a)`` so constant inputs stay
    exactly constant.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be >= 1, got ({out_h}, {out_w})")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    dt = x.dtype
    yi0, yi1, yf = _bilinear_taps(h, out_h)
    xi0, xi1, xf = _bilinear_taps(w, out_w)
    yf_c = yf.astype(dt)[:, None]
    xf_c = xf.astype(dt)
    top = x.data[..., yi0, :]
    rows = top + yf_c * (x.data[..., yi1, :] - top)
    left = rows[..., xi0]
    out = left + xf_c * (rows[..., xi1] - left)

    ry = _taps_matrix(yi0, yi1, yf, h).astype(dt)
    rx = _taps_matrix(xi0, xi1, xf, w).astype(dt)

    def bw(g):
        return (ry.T @ g @ rx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "bilinear_resize")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, target, ignore_index: int = 255, return_count: bool = False):
    """Mean pixel cross-entropy for ``logits[..., n_cls, h, w]`` and labels ``[..., h, w]``.

    Pixels labelled ``ignore_index`` are skipped.  When every pixel is
    ignored the loss is 0; pass ``return_count=True`` to receive the number of
    contributing pixels alongside the loss.
    """
    target = np.asarray(target)
    n_cls = logits.shape[-3]
    if logits.shape[:-3] + logits.shape[-2:] != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} disagree")
    valid = target != ignore_index
    bad = valid & ((target < 0) | (target >= n_cls))
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise LabelError(
            f"label {int(target[where])} at pixel {where} outside [0, {n_cls}) and not ignore_index={ignore_index}"
        )
    count = int(valid.sum())
    z = np.moveaxis(logits.data, -3, -1)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, target, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    if count:
        loss = -(picked * valid).sum() / count
    else:
        loss = 0.0
    out_arr = np.asarray(loss, dtype=logits.dtype)

    def bw(g):
        if not count:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        grad = (p - onehot) * (valid[..., None] / count) * g
        return (np.moveaxis(grad, -1, -3),)

    out = _make(out_arr, (logits,), bw, "cross_entropy")
    return (out, count) if return_count else out


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------

class Tape:
    """Operations reachable from a loss, in topological (execution) order."""

    def __init__(self, entries: list):
        self.entries = entries

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        grads = {id(root): seed}
        for out in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            node = out._node
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    pg = np.asarray(pg, dtype=p.dtype)
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else prev + pg

    def release(self) -> None:
        for out in self.entries:
            out._node = None
        self.entries = []


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar ``loss`` into leaf ``grad`` buffers.

    The recorded graph is discarded afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = Tape.from_output(loss)
    tape.replay(loss, np.ones_like(loss.data))
    tape.release()


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_gradient(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Optional[Iterable[int]] = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``coords`` restricts the probe to a subset of flat indices; other
    entries of the result are left at zero.
    """
    base = x.data
    grad = np.zeros(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    idx = range(base.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(base.shape)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data.reshape(-1)[0])
    return float(v)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def tensor_to_bytes(t: Tensor) -> bytes:
    """``u32 header length | JSON {dtype, shape} | little-endian buffer``."""
    name = DTYPE_NAMES[t.dtype]
    header = json.dumps({"dtype": name, "shape": list(t.shape)}, separators=(",", ":")).encode()
    body = t.data.astype(t.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return struct.pack("<I", len(header)) + header + body


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple:
    """Decode one tensor from ``buf`` at ``offset``; returns (tensor, next_offset)."""
    (hlen,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    header = json.loads(buf[offset : offset + hlen].decode())
    offset += hlen
    dt = DTYPES[header["dtype"]].newbyteorder("<")
    shape = tuple(header["shape"])
    n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    arr = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize, offset=offset).reshape(shape)
    return Tensor(arr.astype(DTYPES[header["dtype"]])), offset + n
