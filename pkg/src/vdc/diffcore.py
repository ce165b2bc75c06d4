"""Tape-based reverse-mode differentiation over numpy arrays.

Only the operations needed by the captioning model are provided.  Every op
takes :class:`Node` inputs that live on the same :class:`Graph`, records a
new node holding its value, and stores a vector-Jacobian closure used by
:func:`backward`.
"""
from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# precision / debug configuration

_DTYPES = {32: np.float32, 64: np.float64}
_config = {"bits": int(os.environ.get("VDC_PRECISION", "64")), "debug": False}
if _config["bits"] not in _DTYPES:
    raise ValueError(f"VDC_PRECISION must be 32 or 64, got {_config['bits']}")


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _config["bits"] = bits


def get_precision() -> int:
    return _config["bits"]


def dtype():
    return _DTYPES[_config["bits"]]


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf when enabled."""
    _config["debug"] = bool(flag)


class precision:
    """Context manager temporarily switching the global precision."""

    def __init__(self, bits: int):
        self.bits = bits

    def __enter__(self):
        self._prev = get_precision()
        set_precision(self.bits)
        return self

    def __exit__(self, *exc):
        set_precision(self._prev)


# ---------------------------------------------------------------------------
# graph


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "value", "vjp", "name")

    def __init__(self, graph, op, inputs, value, vjp=None, name=None):
        self.graph = graph
        self.op = op
        self.inputs = inputs
        self.value = value
        self.vjp = vjp
        self.name = name
        self.id = len(graph.nodes)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Graph:
    """Append-only record of evaluated operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: list | None = None
        self.params: OrderedDict[str, Node] = OrderedDict()

    def _add(self, op, inputs, value, vjp=None, name=None) -> Node:
        for x in inputs:
            if x.graph is not self:
                raise ContractError(f"{op}: input node belongs to another graph")
        value = np.asarray(value)
        if _config["debug"] and not np.all(np.isfinite(value)):
            raise NumericError(f"{op} produced non-finite values")
        node = Node(self, op, tuple(inputs), value, vjp, name)
        self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        return self._add("const", (), np.asarray(value, dtype=dtype()), name=name)

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ContractError(f"parameter {name!r} bound twice")
        node = self._add("param", (), np.asarray(value, dtype=dtype()), name=name)
        self.params[name] = node
        return node

    def grad(self, node: Node) -> np.ndarray:
        if self.grads is None:
            raise ContractError("backward has not been run on this graph")
        g = self.grads[node.id]
        return np.zeros_like(node.value) if g is None else g

    def param_grads(self) -> OrderedDict:
        return OrderedDict((k, self.grad(v)) for k, v in self.params.items())


def backward(loss: Node) -> None:
    """Populate ``loss.graph.grads`` with d loss / d node for every node."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    graph = loss.graph
    grads: list = [None] * len(graph.nodes)
    grads[loss.id] = np.ones_like(loss.value)
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = grads[node.id]
        if g is None or node.vjp is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if grads[inp.id] is None:
                grads[inp.id] = gi
            else:
                grads[inp.id] = grads[inp.id] + gi
    for i, node in enumerate(graph.nodes):
        if grads[i] is None:
            grads[i] = np.zeros_like(node.value)
    graph.grads = grads


# ---------------------------------------------------------------------------
# ops


def _same_shape(op, a: Node, b: Node):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return a.graph._add("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return a.graph._add("transpose", (a,), a.value.T, lambda g: (g.T,))


def linear(x: Node, w: Node) -> Node:
    """x @ w.T for row-batched inputs (weights stored as out x in)."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: cannot apply {w.shape} weights to {x.shape}")
    xv, wv = x.value, w.value
    return x.graph._add("linear", (x, w), xv @ wv.T, lambda g: (g @ wv, g.T @ xv))


def linear_rows(x: Node, w: Node) -> Node:
    """Like ``linear``, but each output row is computed on its own.

    BLAS may round a row differently depending on where it sits in the
    matrix; einsum does not, so permuting the rows of x permutes the output
    bitwise.
    """
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear_rows: cannot apply {w.shape} weights to {x.shape}")
    xv, wv = x.value, w.value
    return x.graph._add("linear_rows", (x, w), np.einsum("nd,ad->na", xv, wv),
                        lambda g: (g @ wv, g.T @ xv))


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return a.graph._add("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return a.graph._add("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.graph._add("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def add_bias(x: Node, b: Node) -> Node:
    """Add a vector to every row of a matrix."""
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return x.graph._add("add_bias", (x, b), x.value + b.value, lambda g: (g, g.sum(axis=0)))


def scale(x: Node, k: float) -> Node:
    return x.graph._add("scale", (x,), x.value * k, lambda g: (g * k,))


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return x.graph._add("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Node) -> Node:
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)
    return x.graph._add("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.graph._add("relu", (x,), x.value * mask, lambda g: (g * mask,))


def elementwise(kind: str, *operands: Node) -> Node:
    table = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid, "relu": relu}
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*operands)


def ordered_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum in ascending-value order, so the result ignores the input order."""
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / ordered_sum(e, axis=-1, keepdims=True)


def softmax_rows(x: Node) -> Node:
    if x.value.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows: expected m x k with k >= 1, got {x.shape}")
    y = _softmax(x.value)

    def vjp(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) * y,)

    return x.graph._add("softmax_rows", (x,), y, vjp)


def log_softmax_np(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    return v - m - np.log(np.exp(v - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Node, targets, weights=None) -> Node:
    """Weighted sum over rows of -log softmax(logits)[row, target].

    Computed with log-sum-exp; rows with weight 0 contribute nothing.
    """
    v = logits.value
    targets = np.asarray(targets, dtype=np.int64)
    m = v.shape[0]
    if v.ndim != 2 or targets.shape != (m,):
        raise DimensionError(f"cross_entropy: logits {v.shape}, targets {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= v.shape[1]):
        raise IndexError(f"cross_entropy: target outside [0, {v.shape[1]})")
    w = np.ones(m, dtype=v.dtype) if weights is None else np.asarray(weights, dtype=v.dtype)
    logp = log_softmax_np(v)
    nll = -logp[np.arange(m), targets]
    total = np.asarray((w * nll).sum(), dtype=v.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(m), targets] -= 1.0
        return (g * w[:, None] * p,)

    return logits.graph._add("cross_entropy", (logits,), total, vjp)


def concat(parts: list, axis: int = 0) -> Node:
    if not parts:
        raise DimensionError("concat: no parts")
    vals = [p.value for p in parts]
    nd = vals[0].ndim
    ax = axis % nd
    for v in vals[1:]:
        if v.ndim != nd or any(v.shape[i] != vals[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: incompatible shapes {[x.shape for x in vals]} along axis {axis}")
    out = np.concatenate(vals, axis=ax)
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return parts[0].graph._add("concat", tuple(parts), out, vjp)


def embed_lookup(E: Node, index) -> Node:
    """Rows of E; a scalar index gives a vector, an index array a matrix."""
    idx = np.asarray(index, dtype=np.int64)
    size = E.shape[0]
    if np.any(idx < 0) or np.any(idx >= size):
        raise IndexError(f"embed_lookup: index {index} outside vocabulary of size {size}")
    out = E.value[idx]

    def vjp(g):
        gE = np.zeros_like(E.value)
        np.add.at(gE, idx, g)
        return (gE,)

    return E.graph._add("embed_lookup", (E,), out, vjp)


def reshape(x: Node, shape) -> Node:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}") from exc
    return x.graph._add("reshape", (x,), out, lambda g: (g.reshape(old),))


def repeat_rows(x: Node, n: int) -> Node:
    """Repeat each row of a matrix n times consecutively: (B, k) -> (B*n, k)."""
    B = x.shape[0]
    out = np.repeat(x.value, n, axis=0)
    return x.graph._add("repeat_rows", (x,), out,
                        lambda g: (g.reshape(B, n, *g.shape[1:]).sum(axis=1),))


def total(x: Node) -> Node:
    return x.graph._add("sum", (x,), np.asarray(x.value.sum()),
                        lambda g: (np.full_like(x.value, g),))


def mean_axis(x: Node, axis: int) -> Node:
    n = x.shape[axis]
    if n < 1:
        raise ContractError("mean over an empty axis")
    out = x.value.mean(axis=axis)

    def vjp(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return x.graph._add("mean_axis", (x,), out, vjp)


def weighted_sum(alpha: Node, V: Node) -> Node:
    """Per-batch weighted sum over n: (B, n) weights with (B, n, d) -> (B, d).

    Summation order does not depend on the order of the n items.
    """
    a, v = alpha.value, V.value
    if a.ndim != 2 or v.ndim != 3 or a.shape != v.shape[:2]:
        raise DimensionError(f"weighted_sum: weights {a.shape} vs features {v.shape}")
    out = ordered_sum(a[:, :, None] * v, axis=1)

    def vjp(g):
        return (np.einsum("bd,bnd->bn", g, v), a[:, :, None] * g[:, None, :])

    return alpha.graph._add("weighted_sum", (alpha, V), out, vjp)


def dropout(x: Node, rate: float, rng: np.random.Generator | None, train: bool) -> Node:
    """Inverted dropout: scaled mask at train time, identity otherwise."""
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.value.dtype) / (1.0 - rate)
    return x.graph._add("dropout", (x,), x.value * keep, lambda g: (g * keep,))


def _triple(v):
    return (v, v, v) if np.isscalar(v) else tuple(v)


def conv3d(x: Node, kernel: Node, bias: Node) -> Node:
    """3x3x3 cross-correlation, zero padding 1, stride 1.

    x: (W, H, T, C_in); kernel: (3, 3, 3, C_in, C_out); bias: (C_out,).
    """
    xv, kv, bv = x.value, kernel.value, bias.value
    if xv.ndim != 4 or kv.ndim != 5 or kv.shape[:3] != (3, 3, 3):
        raise DimensionError(f"conv3d: input {xv.shape}, kernel {kv.shape}")
    if kv.shape[3] != xv.shape[3]:
        raise DimensionError(
            f"conv3d: input has {xv.shape[3]} channels, kernel expects {kv.shape[3]}")
    if bv.shape != (kv.shape[4],):
        raise DimensionError(f"conv3d: bias {bv.shape} for {kv.shape[4]} output channels")
    W, H, T, C = xv.shape
    Co = kv.shape[4]
    xp = np.pad(xv, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.empty((W, H, T, Co), dtype=np.result_type(xv, kv))
    out[...] = bv
    for i in range(3):
        for j in range(3):
            for k in range(3):
                out += xp[i:i + W, j:j + H, k:k + T] @ kv[i, j, k]

    def vjp(g):
        gk = np.empty_like(kv)
        gxp = np.zeros_like(xp)
        g2 = g.reshape(-1, Co)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    win = xp[i:i + W, j:j + H, k:k + T].reshape(-1, C)
                    gk[i, j, k] = win.T @ g2
                    gxp[i:i + W, j:j + H, k:k + T] += g @ kv[i, j, k].T
        return gxp[1:-1, 1:-1, 1:-1], gk, g2.sum(axis=0)

    return x.graph._add("conv3d", (x, kernel, bias), out, vjp)


def maxpool3d(x: Node, window=2, stride=None) -> Node:
    """Max over (W, H, T) windows of a (W, H, T, C) map; channels untouched.

    Gradient goes to the first maximal element of each window in scan order.
    """
    xv = x.value
    if xv.ndim != 4:
        raise DimensionError(f"maxpool3d: expected (W, H, T, C), got {xv.shape}")
    win = _triple(window)
    st = _triple(window if stride is None else stride)
    if min(win) < 1 or min(st) < 1:
        raise DimensionError(f"maxpool3d: window {win} and stride {st} must be >= 1")
    for ax in range(3):
        if win[ax] > xv.shape[ax]:
            raise DimensionError(
                f"maxpool3d: window {win} larger than input extents {xv.shape[:3]}")
    view = np.lib.stride_tricks.sliding_window_view(xv, win, axis=(0, 1, 2))
    view = view[::st[0], ::st[1], ::st[2]]  # (W', H', T', C, w0, w1, w2)
    flat = view.reshape(*view.shape[:4], -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(xv)
        a0, a1, a2 = np.unravel_index(arg, win)
        Wp, Hp, Tp, C = arg.shape
        ow, oh, ot, oc = np.meshgrid(np.arange(Wp), np.arange(Hp), np.arange(Tp),
                                     np.arange(C), indexing="ij")
        np.add.at(gx, (ow * st[0] + a0, oh * st[1] + a1, ot * st[2] + a2, oc), g)
        return (gx,)

    return x.graph._add("maxpool3d", (x,), out, vjp)


def max_axes(x: Node, axes) -> Node:
    """Max over the given axes; gradient to the first maximal element."""
    xv = x.value
    axes = tuple(sorted(a % xv.ndim for a in axes))
    moved = np.moveaxis(xv, axes, range(len(axes)))  # reduced axes first
    flat = moved.reshape(-1, *moved.shape[len(axes):])
    arg = flat.argmax(axis=0)
    out = np.take_along_axis(flat, arg[None], axis=0)[0]

    def vjp(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[None], g[None], axis=0)
        gm = gflat.reshape(moved.shape)
        return (np.moveaxis(gm, range(len(axes)), axes),)

    return x.graph._add("max_axes", (x,), out, vjp)


# ---------------------------------------------------------------------------
# parameters


class ParamStore(OrderedDict):
    """Named trainable arrays.  Shapes are fixed once a name is added."""

    def add(self, name: str, value) -> np.ndarray:
        if name in self:
            raise ContractError(f"duplicate parameter name {name!r}")
        self[name] = np.asarray(value, dtype=dtype())
        return self[name]

    def __setitem__(self, name, value):
        value = np.asarray(value)
        if name in self and self[name].shape != value.shape:
            raise DimensionError(
                f"parameter {name!r} shape is fixed at {self[name].shape}, got {value.shape}")
        super().__setitem__(name, value)

    def bind(self, graph: Graph, names: Iterable[str] | None = None) -> dict:
        names = self.keys() if names is None else names
        return {k: graph.param(k, self[k]) for k in names}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            OrderedDict.__setitem__(out, k, v.copy())
        return out

    def astype(self, dt) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            OrderedDict.__setitem__(out, k, v.astype(dt))
        return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)

    @property
    def worst(self) -> str | None:
        if not self.per_param:
            return None
        return max(self.per_param, key=self.per_param.get)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(builder: Callable[[Graph, dict], Node], params: ParamStore,
               eps: float = 1e-5, tolerance: float | None = None,
               max_coords: int | None = 200, seed: int = 0,
               names: Iterable[str] | None = None) -> GradCheckResult:
    """Compare backprop gradients with central differences.

    ``builder(graph, bound)`` builds the loss from the bound parameter nodes.
    Each parameter is checked on every coordinate, or on a random subsample
    of ``max_coords`` coordinates for larger tensors.  If ``tolerance`` is
    given, a failing check raises ``NumericError``.
    """
    names = list(params.keys() if names is None else names)
    rng = np.random.default_rng(seed)

    def loss_value():
        g = Graph()
        val = float(builder(g, params.bind(g)).value)
        if not np.isfinite(val):
            raise NumericError(f"grad_check: non-finite loss {val}")
        return val

    g = Graph()
    loss = builder(g, params.bind(g))
    if not np.isfinite(loss.value).all():
        raise NumericError("grad_check: non-finite loss")
    backward(loss)
    analytic = g.param_grads()

    per_param = {}
    for name in names:
        arr = params[name]
        flat = arr.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for c in coords:
            old = flat[c]
            flat[c] = old + eps
            fp = loss_value()
            flat[c] = old - eps
            fm = loss_value()
            flat[c] = old
            gn = (fp - fm) / (2 * eps)
            err = abs(ga[c] - gn) / max(abs(ga[c]), abs(gn), 1e-8)
            worst = max(worst, err)
        per_param[name] = worst
    result = GradCheckResult(max(per_param.values(), default=0.0), per_param)
    if tolerance is not None and not result.passed(tolerance):
        raise NumericError(
            f"grad_check: {result.worst} relative error {result.max_rel_error:.3e}"
            f" >= {tolerance}")
    return result
