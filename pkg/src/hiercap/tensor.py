"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable computation is built from the primitives registered in
``PRIMITIVES``. While a :class:`Tape` is active, each primitive applied to a
tensor that requires gradients appends a node to the tape; :func:`backward`
then sweeps the tape in reverse.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = sum_(tanh(w))
    ...     backward(loss)
    >>> w.grad.shape
    (1, 2)
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


class GradError(RuntimeError):
    """Raised for invalid backward / gradient-check requests."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("hiercap_tape", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through registered primitives
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
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple[Tensor, ...]
    saved: Any


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Node ids are assigned in append order, so the inputs of node ``i`` always
    carry ids below ``i`` and a reverse sweep is a valid topological order.
    """

    nodes: list[Node] = field(default_factory=list)
    _token: Any = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, kind: str, inputs: tuple[Tensor, ...], out: Tensor, saved) -> None:
        node = Node(len(self.nodes), kind, inputs, saved)
        self.nodes.append(node)
        out.node_id = node.id
        out.tape = self
        out.requires_grad = True

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_grad():
    """Suspend recording: primitives inside run forward only."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


@dataclass
class Primitive:
    kind: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[Any, np.ndarray], Sequence[np.ndarray | None]] | None


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(kind: str, forward, backward=None) -> Primitive:
    prim = Primitive(kind, forward, backward)
    PRIMITIVES[kind] = prim
    return prim


def apply_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Run primitive ``kind`` forward and record it on the active tape."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise GradError(f"unknown primitive {kind!r}") from None
    tensors = tuple(as_tensor(t) for t in inputs)
    out_data, saved = prim.forward(*(t.data for t in tensors), **attrs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out.node_id = None
    out.tape = None
    out.name = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in tensors):
        if prim.backward is None:
            raise GradError(f"primitive {kind!r} has no backward rule")
        tape.record(kind, tensors, out, saved)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-enabled leaf."""
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar root, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node_id is None:
        raise GradError("loss is not on a tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        in_grads = PRIMITIVES[node.kind].backward(node.saved, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.tape is tape and t.node_id is not None:
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
            else:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi


# ------------------------------------------------------------ primitives ----

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(s, g):
    return _unbroadcast(g, s[0]), _unbroadcast(g, s[1])


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(s, g):
    return _unbroadcast(g, s[0]), -_unbroadcast(g, s[1])


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b, (a, b)


def _mul_bwd(s, g):
    a, b = s
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    _check_broadcast("div", a, b)
    return a / b, (a, b)


def _div_bwd(s, g):
    a, b = s
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _matmul_fwd(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    return out, (a, b)


def _matmul_bwd(s, g):
    a, b = s
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    if a.ndim == 1:
        ga = ga[..., 0, :]
    if b.ndim == 1:
        gb = gb[..., 0]
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _tanh_fwd(a):
    y = np.tanh(a)
    return y, y


def _sigmoid_fwd(a):
    # split by sign so exp never overflows
    y = np.empty_like(a)
    pos = a >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    y[~pos] = ea / (1.0 + ea)
    return y, y


def _elu_fwd(a, alpha=1.0):
    neg = np.expm1(np.minimum(a, 0.0)) * alpha
    y = np.where(a > 0, a, neg)
    return y, (a, neg, alpha)


def _elu_bwd(s, g):
    a, neg, alpha = s
    return (g * np.where(a > 0, 1.0, neg + alpha),)


def _exp_fwd(a):
    y = np.exp(a)
    return y, y


def _log_fwd(a):
    return np.log(a), a


def _embedding_fwd(table, ids=None):
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: ids out of range for table {table.shape}")
    return table[ids], (table.shape, ids)


def _embedding_bwd(s, g):
    shape, ids = s
    gt = np.zeros(shape)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
    return (gt,)


def _dropout_fwd(a, rate=0.1, train=True, rng=None):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a.copy(), None
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    mask = (gen.random(a.shape) >= rate) / (1.0 - rate)
    return a * mask, mask


def _dropout_bwd(mask, g):
    return (g if mask is None else g * mask,)


def _reshape_fwd(a, shape=None):
    try:
        return a.reshape(shape), a.shape
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None


def _transpose_fwd(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    return np.transpose(a, axes), tuple(np.argsort(axes))


def _transpose_bwd(inv, g):
    return (np.transpose(g, inv),)


def _concat_fwd(*arrays, axis=-1):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[a.shape for a in arrays]} on axis {axis}") from None
    sizes = [a.shape[axis] for a in arrays]
    return out, (axis, np.cumsum(sizes)[:-1])


def _concat_bwd(s, g):
    axis, splits = s
    return tuple(np.split(g, splits, axis=axis))


def _pool_mean_fwd(a, axis=None, keepdims=False):
    return a.mean(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _pool_mean_bwd(s, g):
    shape, axis, keepdims = s
    axes = tuple(range(len(shape))) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    axes = tuple(ax % len(shape) for ax in axes)
    n = int(np.prod([shape[ax] for ax in axes]))
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / n, shape).copy(),)


def _sum_fwd(a, axis=None, keepdims=False):
    return a.sum(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _sum_bwd(s, g):
    shape, axis, keepdims = s
    axes = tuple(range(len(shape))) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, shape).copy(),)


def _getitem_fwd(a, index=None):
    return a[index], (a.shape, index)


def _getitem_bwd(s, g):
    shape, index = s
    ga = np.zeros(shape)
    parts = index if isinstance(index, tuple) else (index,)
    if all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts):
        ga[index] += g  # basic indexing: a view, no repeated targets
    else:
        np.add.at(ga, index, g)
    return (ga,)


def _softmax_fwd(a, axis=-1):
    if a.size == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def _softmax_bwd(s, g):
    y, axis = s
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax_fwd(a, axis=-1):
    if a.size == 0 or a.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty vector")
    z = a - a.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return y, (y, axis)


def _log_softmax_bwd(s, g):
    y, axis = s
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


def _cross_entropy_fwd(logits, targets=None, pad_id=None):
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    nv = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= nv):
        raise DimensionError(f"cross_entropy: target ids outside vocabulary of size {nv}")
    mask = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target is padding (empty reduction)")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count
    return np.asarray(loss), (logp, targets, mask, count)


def _cross_entropy_bwd(s, g):
    logp, targets, mask, count = s
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    grad *= (mask / count)[..., None]
    return (grad * g,)


def _conv1d_causal_fwd(x, w, b):
    # x: (..., C_in, T); w: (C_out, C_in, K); b: (C_out,)
    if w.ndim != 3 or x.ndim < 2 or b.shape != (w.shape[0],):
        raise DimensionError(f"conv1d_causal: bad shapes x={x.shape} w={w.shape} b={b.shape}")
    c_out, c_in, k = w.shape
    if x.shape[-2] != c_in:
        raise DimensionError(f"conv1d_causal: x has {x.shape[-2]} channels, kernel expects {c_in}")
    t = x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 1) + [(k - 1, 0)]
    xp = np.pad(x, pad)
    # cols[..., c*K + j, t] = xp[..., c, t + j]
    cols = np.lib.stride_tricks.sliding_window_view(xp, t, axis=-1)  # (..., C_in, K, T)
    cols = cols.reshape(x.shape[:-2] + (c_in * k, t))
    wf = w.reshape(c_out, c_in * k)
    out = np.matmul(wf, cols) + b[:, None]
    return out, (cols, w, x.shape)


def _conv1d_causal_bwd(s, g):
    cols, w, xshape = s
    c_out, c_in, k = w.shape
    t = xshape[-1]
    wf = w.reshape(c_out, c_in * k)
    gw = np.matmul(g, np.swapaxes(cols, -1, -2))
    gw = gw.reshape(-1, c_out, c_in * k).sum(axis=0).reshape(w.shape)
    gb = g.reshape(-1, c_out, t).sum(axis=(0, 2))
    gcols = np.matmul(wf.T, g).reshape(xshape[:-2] + (c_in, k, t))
    gx = np.zeros(xshape)
    for j in range(k):
        # column j at output t reads input position t + j - (K - 1)
        shift = k - 1 - j
        if shift == 0:
            gx += gcols[..., j, :]
        elif shift < t:
            gx[..., : t - shift] += gcols[..., j, shift:]
    return gx, gw, gb


def _conv2d_fwd(x, w, b, stride=1, pad=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: bad shapes x={x.shape} w={w.shape} b={b.shape}")
    bsz, _, h, wd = x.shape
    o, c, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    cols = kernels.im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(o, -1), cols) + b[:, None]
    return out.reshape(bsz, o, ho, wo), (cols, w, x.shape, stride, pad)


def _conv2d_bwd(s, g):
    cols, w, xshape, stride, pad = s
    o, c, kh, kw = w.shape
    g2 = g.reshape(g.shape[0], o, -1)
    gw = np.einsum("bop,bkp->ok", g2, cols).reshape(w.shape)
    gb = g2.sum(axis=(0, 2))
    gcols = np.matmul(w.reshape(o, -1).T, g2)
    gx = kernels.col2im(gcols, xshape, kh, kw, stride, pad)
    return gx, gw, gb


def _simple(fwd_fn, deriv):
    def bwd(y, g):
        return (g * deriv(y),)
    return fwd_fn, bwd


register_primitive("add", _add_fwd, _add_bwd)
register_primitive("sub", _sub_fwd, _sub_bwd)
register_primitive("mul", _mul_fwd, _mul_bwd)
register_primitive("div", _div_fwd, _div_bwd)
register_primitive("matmul", _matmul_fwd, _matmul_bwd)
register_primitive("tanh", *_simple(_tanh_fwd, lambda y: 1.0 - y * y))
register_primitive("sigmoid", *_simple(_sigmoid_fwd, lambda y: y * (1.0 - y)))
register_primitive("exp", *_simple(_exp_fwd, lambda y: y))
register_primitive("log", _log_fwd, lambda a, g: (g / a,))
register_primitive("elu", _elu_fwd, _elu_bwd)
register_primitive("embedding_lookup", _embedding_fwd, _embedding_bwd)
register_primitive("dropout", _dropout_fwd, _dropout_bwd)
register_primitive("reshape", _reshape_fwd, lambda shape, g: (g.reshape(shape),))
register_primitive("transpose", _transpose_fwd, _transpose_bwd)
register_primitive("concat", _concat_fwd, _concat_bwd)
register_primitive("pool_mean", _pool_mean_fwd, _pool_mean_bwd)
register_primitive("sum", _sum_fwd, _sum_bwd)
register_primitive("getitem", _getitem_fwd, _getitem_bwd)
register_primitive("softmax", _softmax_fwd, _softmax_bwd)
register_primitive("log_softmax", _log_softmax_fwd, _log_softmax_bwd)
register_primitive("cross_entropy", _cross_entropy_fwd, _cross_entropy_bwd)
register_primitive("conv1d_causal", _conv1d_causal_fwd, _conv1d_causal_bwd)
register_primitive("conv2d", _conv2d_fwd, _conv2d_bwd)


# ------------------------------------------------------- functional API ----

def add(a, b):
    return apply_primitive("add", a, b)


def sub(a, b):
    return apply_primitive("sub", a, b)


def mul(a, b):
    return apply_primitive("mul", a, b)


def div(a, b):
    return apply_primitive("div", a, b)


def matmul(a, b):
    return apply_primitive("matmul", a, b)


def tanh(a):
    return apply_primitive("tanh", a)


def sigmoid(a):
    return apply_primitive("sigmoid", a)


def elu(a, alpha: float = 1.0):
    return apply_primitive("elu", a, alpha=alpha)


def exp(a):
    return apply_primitive("exp", a)


def log(a):
    return apply_primitive("log", a)


def embedding_lookup(table, ids):
    return apply_primitive("embedding_lookup", table, ids=np.asarray(ids, dtype=np.int64))


def dropout(a, rate: float = 0.1, train: bool = True, rng=None):
    return apply_primitive("dropout", a, rate=rate, train=train, rng=rng)


def reshape(a, shape):
    return apply_primitive("reshape", a, shape=tuple(shape))


def transpose(a, axes=None):
    return apply_primitive("transpose", a, axes=None if axes is None else tuple(axes))


def concat(tensors, axis: int = -1):
    return apply_primitive("concat", *tensors, axis=axis)


def pool_mean(a, axis=None, keepdims: bool = False):
    return apply_primitive("pool_mean", a, axis=axis, keepdims=keepdims)


def sum_(a, axis=None, keepdims: bool = False):
    return apply_primitive("sum", a, axis=axis, keepdims=keepdims)


def getitem(a, index):
    return apply_primitive("getitem", a, index=index)


def softmax(a, axis: int = -1):
    return apply_primitive("softmax", a, axis=axis)


def log_softmax(a, axis: int = -1):
    return apply_primitive("log_softmax", a, axis=axis)


def cross_entropy(logits, targets, pad_id: int | None = None):
    """Mean token cross-entropy over positions whose target is not ``pad_id``."""
    return apply_primitive("cross_entropy", logits, targets=np.asarray(targets, dtype=np.int64), pad_id=pad_id)


def conv1d_causal(x, kernels_, bias):
    """Causal 1-D convolution over the last axis of ``x`` (channels on axis -2).

    Output position ``t`` sees inputs ``t-K+1 .. t`` only; the sequence is
    left-padded with ``K-1`` zeros so the length is preserved.
    """
    return apply_primitive("conv1d_causal", x, kernels_, bias)


def conv2d(x, w, b, stride: int = 1, pad: int = 0):
    return apply_primitive("conv2d", x, w, b, stride=stride, pad=pad)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ------------------------------------------------------------------- GRU ----

@dataclass
class GruParams:
    """GRU weights; gate order along the first axis is (update, reset, candidate)."""

    w_in: Tensor  # (3, hidden, input)
    w_state: Tensor  # (3, hidden, hidden)
    bias: Tensor  # (3, hidden)

    def __post_init__(self):
        three, hid, _ = self.w_in.shape
        if three != 3 or self.w_state.shape != (3, hid, hid) or self.bias.shape != (3, hid):
            raise DimensionError(
                f"GruParams: inconsistent shapes {self.w_in.shape}, {self.w_state.shape}, {self.bias.shape}"
            )

    @property
    def input_size(self) -> int:
        return self.w_in.shape[2]

    @property
    def hidden_size(self) -> int:
        return self.w_in.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruParams":
        s_in = 1.0 / np.sqrt(input_size)
        s_h = 1.0 / np.sqrt(hidden_size)
        return cls(
            Tensor(rng.uniform(-s_in, s_in, (3, hidden_size, input_size)), requires_grad=True),
            Tensor(rng.uniform(-s_h, s_h, (3, hidden_size, hidden_size)), requires_grad=True),
            Tensor(np.zeros((3, hidden_size)), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w_in": self.w_in, "w_state": self.w_state, "bias": self.bias}


def gru_cell(x, h, p: GruParams) -> Tensor:
    """One GRU step on (..., input) and (..., hidden) operands.

    z = sigmoid(W_z x + U_z h + b_z); r = sigmoid(W_r x + U_r h + b_r);
    h~ = tanh(W_h x + U_h (r*h) + b_h); h' = (1 - z) * h + z * h~.
    """
    x, h = as_tensor(x), as_tensor(h)
    hid, n_in = p.hidden_size, p.input_size
    if x.shape[-1] != n_in or h.shape[-1] != hid:
        raise DimensionError(f"gru_cell: x {x.shape} / h {h.shape} vs params input={n_in} hidden={hid}")
    gx = matmul(x, transpose(reshape(p.w_in, (3 * hid, n_in))))
    gx = add(gx, reshape(p.bias, (3 * hid,)))
    u_zr = transpose(reshape(getitem(p.w_state, slice(0, 2)), (2 * hid, hid)))
    gh = matmul(h, u_zr)
    z = sigmoid(add(getitem(gx, (Ellipsis, slice(0, hid))), getitem(gh, (Ellipsis, slice(0, hid)))))
    r = sigmoid(add(getitem(gx, (Ellipsis, slice(hid, 2 * hid))), getitem(gh, (Ellipsis, slice(hid, 2 * hid)))))
    u_h = transpose(getitem(p.w_state, 2))
    cand = tanh(add(getitem(gx, (Ellipsis, slice(2 * hid, 3 * hid))), matmul(mul(r, h), u_h)))
    return add(mul(sub(1.0, z), h), mul(z, cand))


# ------------------------------------------------------------ grad check ----

def grad_check(op, inputs: Sequence, eps: float = 1e-5, seed: int = 0, **attrs) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``op`` is either a registered primitive name or a callable composed of
    primitives. The scalar probed is ``sum(out * R)`` for a fixed random ``R``
    so every output element contributes.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if isinstance(op, str):
        prim = PRIMITIVES.get(op)
        if prim is None or prim.backward is None:
            raise GradError(f"primitive {op!r} has no registered backward rule")
        fn = lambda *ts: apply_primitive(op, *ts, **attrs)  # noqa: E731
    else:
        fn = op
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*(Tensor(leaf.data) for leaf in leaves))
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar(arrays):
        ts = [Tensor(a) for a in arrays]
        return float((fn(*ts).data * proj).sum())

    with Tape():
        out = fn(*leaves)
        loss = sum_(mul(out, proj))
        backward(loss)
    worst = 0.0
    base = [leaf.data.copy() for leaf in leaves]
    for idx, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = np.zeros_like(leaf.data)
        flat = base[idx].reshape(-1)
        for k in range(flat.size):
            arrays = [b.copy() for b in base]
            af = arrays[idx].reshape(-1)
            af[k] = flat[k] + eps
            fp = scalar(arrays)
            af[k] = flat[k] - eps
            fm = scalar(arrays)
            numeric.reshape(-1)[k] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


def grad_check_params(params: Sequence[Tensor], loss_fn, eps: float = 1e-5) -> float:
    """Worst relative error of d(loss_fn())/d(param) over every element of ``params``.

    ``loss_fn`` takes no arguments and must build a scalar from the given
    parameter tensors; they are perturbed in place and restored afterwards.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    with Tape():
        backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(loss_fn().data)
            flat[k] = orig - eps
            fm = float(loss_fn().data)
            flat[k] = orig
            nflat[k] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
