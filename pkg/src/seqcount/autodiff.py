"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable computation in the package is built from the primitives
in this module.  Operations record themselves on the thread's active
:class:`Graph` whenever one of their inputs requires a gradient; the tape is
append-only, so it is already in topological order and :meth:`Graph.backward`
simply walks it in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "GradCheckReport",
    "tensor", "constant", "active_graph", "reset_graph", "no_grad", "backward",
    "matmul", "conv2d", "add", "sub", "mul", "div", "neg", "tanh", "sigmoid",
    "exp", "log", "sum", "mean", "concat", "reshape", "transpose",
    "upsample_nearest", "softmax", "log_softmax", "take", "grad_check",
]


class ShapeError(ValueError):
    pass


_state = threading.local()


def active_graph() -> "Graph":
    g = getattr(_state, "graph", None)
    if g is None:
        g = _state.graph = Graph()
    return g


def reset_graph() -> "Graph":
    """Install a fresh default graph for the calling thread and return it."""
    _state.graph = Graph()
    return _state.graph


def _recording() -> bool:
    return not getattr(_state, "no_grad", False)


@contextlib.contextmanager
def no_grad():
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None  # (graph, index) for recorded outputs
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    @property
    def T(self):
        return transpose(self)


def tensor(value, requires_grad=False, name=None) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Node:
    kind: str
    inputs: tuple
    out: Tensor
    vjp: Callable


class Graph:
    """Append-only tape of recorded operations.

    Use as a context manager to make it the active graph for the enclosed
    block; otherwise ops record on the thread's default graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "graph", None)
        _state.graph = self
        return self

    def __exit__(self, *exc):
        _state.graph = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes.clear()
        self.gradients = {}
        self.consumed = False

    def record(self, kind, out, inputs, vjp):
        if self.consumed:
            raise RuntimeError("graph already consumed by backward(); reset it first")
        out.requires_grad = True
        out.node = (self, len(self.nodes))
        self.nodes.append(_Node(kind, inputs, out, vjp))
        return out

    def backward(self, loss: Tensor) -> dict:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node[0] is not self:
            raise ValueError("loss was not produced by this graph")
        if self.consumed:
            raise RuntimeError("graph already consumed by backward(); reset it first")
        grads = {loss.node[1]: np.ones_like(loss.value)}
        leaves: dict[Tensor, np.ndarray] = {}
        for idx in range(loss.node[1], -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            node = self.nodes[idx]
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is not None and inp.node[0] is self:
                    j = inp.node[1]
                    grads[j] = gi if j not in grads else grads[j] + gi
                elif inp.node is None:
                    leaves[inp] = gi if inp not in leaves else leaves[inp] + gi
        for leaf, g in leaves.items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self.gradients = grads
        self.consumed = True
        return leaves


def backward(loss: Tensor) -> dict:
    """Backpropagate from ``loss`` through the graph that produced it."""
    if loss.node is None:
        raise ValueError("loss does not depend on any tensor requiring grad")
    return loss.node[0].backward(loss)


def _make(kind, value, inputs, vjp) -> Tensor:
    out = Tensor(value)
    if _recording() and any(t.requires_grad for t in inputs):
        active_graph().record(kind, out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(kind, a, b, fn):
    a, b = constant(a), constant(b)
    try:
        return a, b, fn(a.value, b.value)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b, v = _binary("add", a, b, np.add)
    return _make("add", v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b, v = _binary("sub", a, b, np.subtract)
    return _make("sub", v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b, v = _binary("mul", a, b, np.multiply)
    return _make("mul", v, (a, b), lambda g: (_unbroadcast(g * b.value, a.shape),
                                              _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b, v = _binary("div", a, b, np.divide)
    return _make("div", v, (a, b), lambda g: (_unbroadcast(g / b.value, a.shape),
                                              _unbroadcast(-g * v / b.value, b.shape)))


def neg(a) -> Tensor:
    a = constant(a)
    return _make("neg", -a.value, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = constant(a)
    v = np.tanh(a.value)
    return _make("tanh", v, (a,), lambda g: (g * (1.0 - v * v),))


def sigmoid(a) -> Tensor:
    a = constant(a)
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    v = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", v, (a,), lambda g: (g * v * (1.0 - v),))


def exp(a) -> Tensor:
    a = constant(a)
    v = np.exp(a.value)
    return _make("exp", v, (a,), lambda g: (g * v,))


def log(a) -> Tensor:
    a = constant(a)
    if np.any(a.value <= 0):
        raise ValueError(f"log: non-positive input (min {a.value.min():.3g})")
    return _make("log", np.log(a.value), (a,), lambda g: (g / a.value,))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = constant(a)
    axes = _norm_axis(axis, a.ndim)
    v = a.value.sum(axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _make("sum", v, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = constant(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    v = a.value.mean(axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / n,)

    return _make("mean", v, (a,), vjp)


# ------------------------------------------------------------------- shaping

def reshape(a, shape) -> Tensor:
    a = constant(a)
    try:
        v = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make("reshape", v, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = constant(a)
    v = np.transpose(a.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", v, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis=-1) -> Tensor:
    ts = [constant(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    try:
        v = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    ax = axis % v.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make("concat", v, tuple(ts), vjp)


def take(a, index) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""
    a = constant(a)
    v = a.value[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def vjp(g):
        out = np.zeros_like(a.value)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make("take", np.array(v), (a,), vjp)


def upsample_nearest(a, size) -> Tensor:
    """Nearest-neighbour resize of an (N, H, W, C) tensor to spatial ``size``.

    Source index for output cell i is floor(i * H_in / H_out), which is a
    pure repeat for integer up-factors and strided subsampling for integer
    down-factors.
    """
    a = constant(a)
    if a.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected (N, H, W, C), got {a.shape}")
    n, h, w, c = a.shape
    ho, wo = size
    rows = (np.arange(ho) * h) // ho
    cols = (np.arange(wo) * w) // wo
    v = a.value[:, rows][:, :, cols]

    def vjp(g):
        out = np.zeros((n, h, wo, c))
        np.add.at(out, (slice(None), rows), g)
        res = np.zeros_like(a.value)
        np.add.at(res, (slice(None), slice(None), cols), out)
        return (res,)

    return _make("upsample_nearest", v, (a,), vjp)


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        v = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        a2 = a.value[None, :] if a.ndim == 1 else a.value
        b2 = b.value[:, None] if b.ndim == 1 else b.value
        g2 = g.reshape(np.matmul(a2, b2).shape)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
        return ga, gb

    return _make("matmul", v, (a, b), vjp)


def conv2d(x, w, stride=1, padding=0) -> Tensor:
    """Direct 2-D convolution.

    x: (N, H, W, Cin); w: (k, k, Cin, Cout).  Zero padding on both sides.
    """
    x, w = constant(x), constant(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    k, cout = w.shape[0], w.shape[3]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.value, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((n, ho, wo, k, k, cin))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + span_h:stride, j:j + span_w:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * cin)
    v = (cols @ w.value.reshape(k * k * cin, cout)).reshape(n, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = gx = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if x.requires_grad:
            gcols = (g2 @ w.value.reshape(k * k * cin, cout).T).reshape(n, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + span_h:stride, j:j + span_w:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + wd, :]
        return gx, gw

    return _make("conv2d", v, (x, w), vjp)


# ------------------------------------------------------------------- softmax

def softmax(a, axis=-1) -> Tensor:
    a = constant(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    v = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (v * (g - (g * v).sum(axis=axis, keepdims=True)),)

    return _make("softmax", v, (a,), vjp)


def log_softmax(a, axis=-1) -> Tensor:
    a = constant(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    v = z - lse
    p = np.exp(v)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", v, (a,), vjp)


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    per_param: dict = field(default_factory=dict)
    tol: float = 1e-3
    entries_checked: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_err:.3e} (tol {self.tol:g}, {self.entries_checked} entries)"


def grad_check(f: Callable[[], Tensor], params, step=1e-5, tol=1e-3, floor=1e-6,
               max_entries=None, seed=0) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``params`` is a mapping name -> Tensor or a sequence of Tensors.  The
    relative error of one entry is |a - n| / max(|a|, |n|, floor); ``floor``
    keeps entries whose true gradient is ~0 from being judged on round-off.
    ``max_entries`` caps the entries probed per tensor (random subset); None
    probes every entry.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    with no_grad():
        f0, f1 = f().value.copy(), f().value.copy()
    if not np.array_equal(f0, f1):
        raise RuntimeError("grad_check: f is not deterministic (two forward passes differ)")

    saved = {name: (p.grad, p.requires_grad) for name, p in named}
    for _, p in named:
        p.grad = None
        p.requires_grad = True
    with Graph() as g:
        loss = f()
        g.backward(loss)
    analytic = {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for name, p in named}
    for name, p in named:
        p.grad, p.requires_grad = saved[name]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, p in named:
            flat = p.value.reshape(-1)
            idxs = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idxs = np.sort(rng.choice(flat.size, max_entries, replace=False))
            worst = 0.0
            a_flat = analytic[name].reshape(-1)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                a = a_flat[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
            report.per_param[name] = worst
            report.entries_checked += len(idxs)
    return report

