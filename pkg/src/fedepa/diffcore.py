"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every node records its parents and a closure that pushes the output gradient
back to them.  Nodes carry a global creation index, so sorting a graph by that
index reproduces forward execution order; :func:`backward` walks the reverse
of that order (the tape) exactly once.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, projections)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_index", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._index = next(_counter)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def copy(self) -> "Tensor":
        """Deep copy as a fresh leaf with the same ``requires_grad`` flag."""
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._op = op
    out._index = next(_counter)
    out._consumed = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in forward execution order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._index)
    return nodes


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every tracked leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if root._consumed:
        raise RuntimeError("backward: graph already consumed; rebuild the forward pass first")
    if not root.requires_grad:
        raise RuntimeError("backward: root does not depend on any tensor requiring grad")
    tape = build_tape(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in tape:
        if node._consumed:
            raise RuntimeError("backward: graph already consumed; rebuild the forward pass first")
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                _accumulate(node, g)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in tape:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    root._consumed = True


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


elementwise_mul = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scalar_mul", lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError(f"log: non-positive input (min {a.data.min():.3g})")
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError(f"sqrt: non-positive input (min {a.data.min():.3g})")
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def _logaddexp(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # np.logaddexp is several times slower than this max-shifted form on some builds
    hi = np.maximum(x, y)
    finite = np.where(np.isfinite(hi), hi, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return finite + np.log(np.exp(x - finite) + np.exp(y - finite))


def logaddexp(a, b) -> Tensor:
    """log(exp(a) + exp(b)), elementwise and overflow-free."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("logaddexp", a, b)
    out = _logaddexp(a.data, b.data)
    return _make(out, (a, b), "logaddexp",
                 lambda g: (_unbroadcast(g * np.exp(a.data - out), a.shape),
                            _unbroadcast(g * np.exp(b.data - out), b.shape)))


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = tuple(ax % len(shape) for ax in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if keepdims or axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (_expand(g, shape, axis).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _check_axis(op: str, a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"{op}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def logsumexp(a: Tensor, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Stable log-sum-exp along ``axis``; ``where`` masks out entries (False = excluded)."""
    axis = _check_axis("logsumexp", a, axis)
    x = a.data
    if where is not None:
        where = np.broadcast_to(where, x.shape)
        if not np.all(where.any(axis=axis)):
            raise ValueError("logsumexp: a reduction slice has every entry masked out")
        x = np.where(where, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s

    return _make(out, (a,), "logsumexp", lambda g: (np.expand_dims(g, axis) * w,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("log_softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_softmax", bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) operands must share leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    ok = ok and (b.ndim == 2 or a.shape[:-2] == b.shape[:-2])
    if not ok:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(a.ndim - 1))))
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), "matmul", bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no tensors")
    ref = tensors[0]
    axis = _check_axis("concat", ref, axis)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ValueError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, tensors, "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    axis = _check_axis("slice", a, axis)
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ValueError(f"slice: range [{start}:{stop}] invalid for axis {axis} of shape {a.shape}")
    index = [np.s_[:]] * a.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), "slice", bw)


def pick(a: Tensor, indices: np.ndarray) -> Tensor:
    """``a[i, indices[i]]`` for a 2-d tensor: one entry per row."""
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.shape[0])
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        full[rows, indices] = g
        return (full,)

    return _make(a.data[rows, indices], (a,), "pick", bw)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Valid cross-correlation, stride 1. x: (B, C, H, W); w: (F, C, kh, kw); b: (F,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    F, C, kh, kw = w.shape
    B, _, H, W = x.shape
    if H < kh or W < kw:
        raise ValueError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    Ho, Wo = H - kh + 1, W - kw + 1
    # im2col: rows are (b, h, w) output positions, columns are (c, i, j) kernel taps
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(F, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        gx = np.zeros(x.shape)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), parents, "conv2d", bw)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ValueError(f"maxpool2d: input {x.shape} smaller than pool size {size}")
    crop = x.data[:, :, :Ho * size, :Wo * size]
    win = crop.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        full = np.zeros(x.shape)
        full[:, :, :Ho * size, :Wo * size] = gw
        return (full,)

    return _make(out, (x,), "maxpool2d", bw)


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------


def row_norm(a: Tensor) -> Tensor:
    sq = np.sum(a.data * a.data, axis=-1)
    if np.any(sq == 0):
        raise ValueError("row_norm: zero-norm vector")
    return sqrt(sum(square(a), axis=-1, keepdims=True))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """a.b / (|a||b|) for two vectors of equal length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    if not np.any(a.data) or not np.any(b.data):
        raise ValueError("cosine_similarity: zero-norm input")
    return div(sum(mul(a, b)), sum(mul(row_norm(a), row_norm(b))))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"cross_entropy: label out of range [0, {C})")
    return scalar_mul(sum(pick(log_softmax(logits, axis=1), labels)), -1.0 / labels.size)


# ---------------------------------------------------------------------------
# parameter updates (off-graph)
# ---------------------------------------------------------------------------


def clamp01(t: Tensor) -> Tensor:
    """Elementwise projection onto [0, 1]; not recorded on any graph."""
    return Tensor(np.clip(t.data, 0.0, 1.0), requires_grad=t.requires_grad)


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """p <- p - lr * grad, then zero the gradient."""
    if lr <= 0:
        raise ValueError(f"sgd_step: lr must be positive, got {lr}")
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad
        p.zero_grad()


def numerical_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)`` measured on the whole
    gradient vector norm per parameter, so isolated near-zero entries do not
    dominate.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        with no_grad():
            n = numerical_grad(lambda: loss_fn().item(), p, eps)
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    for p in params:
        p.zero_grad()
    return worst
