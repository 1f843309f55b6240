"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only tape. Every operation appends one node
holding its output value and a closure computing the vector-Jacobian product
for its inputs, so node ids are topologically ordered by construction and
:meth:`Graph.backward` is a single reverse sweep over the tape.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; ``shape`` and
the flat row-major buffer (``arr.ravel()``) are the numpy ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, ShapeError

Array = np.ndarray
VJP = Callable[[Array], Sequence["Array | None"]]


@dataclass(frozen=True)
class Uniform:
    """Seeded fill spec: i.i.d. uniform(-bound, bound) from ``default_rng(seed)``."""

    bound: float
    seed: int


def tensor_create(shape: Sequence[int], fill: float | Uniform = 0.0) -> Array:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {list(shape)}: dims must be >= 1")
    if isinstance(fill, Uniform):
        rng = np.random.default_rng(fill.seed)
        return rng.uniform(-fill.bound, fill.bound, size=shape).astype(np.float64)
    return np.full(shape, float(fill), dtype=np.float64)


def glorot_bound(shape: Sequence[int]) -> float:
    """Half-width of the Glorot/Xavier uniform range for a weight tensor.

    Matrices ``[fan_in, fan_out]``; conv kernels ``[Cout, Cin, kh, kw]`` use
    ``fan_in = Cin*kh*kw`` and ``fan_out = Cout*kh*kw``.
    """
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        raise ShapeError(f"no fan-in/fan-out rule for rank-{len(shape)} tensor")
    return math.sqrt(6.0 / (fan_in + fan_out))


def sigmoid(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: Array
    vjp: VJP | None = None
    is_param: bool = False


class Var:
    """Handle to a node on a graph; supports ``+ - * @`` between handles."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> Array:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: "Var") -> "Var":
        return self.graph.add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return self.graph.sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return self.graph.mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return self.graph.matmul(self, other)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"


def _same_shape(kind: str, a: Var, b: Var) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


class Graph:
    """Append-only computation tape. Not thread-safe; use one per thread."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _push(self, kind: str, inputs: Sequence[Var], value: Array,
              vjp: VJP | None, is_param: bool = False) -> Var:
        for v in inputs:
            if v.graph is not self:
                raise ContractError(f"{kind}: operand belongs to another graph")
        self.nodes.append(Node(kind, tuple(v.id for v in inputs), value, vjp, is_param))
        return Var(self, len(self.nodes) - 1)

    # leaves

    def param(self, value: Array) -> Var:
        """Leaf whose gradient is always reported by :meth:`backward`."""
        return self._push("param", (), np.asarray(value, dtype=np.float64), None, True)

    def const(self, value: Array | float) -> Var:
        return self._push("const", (), np.asarray(value, dtype=np.float64), None)

    # elementwise

    def add(self, a: Var, b: Var) -> Var:
        _same_shape("add", a, b)
        return self._push("add", (a, b), a.value + b.value, lambda g: (g, g))

    def sub(self, a: Var, b: Var) -> Var:
        _same_shape("sub", a, b)
        return self._push("sub", (a, b), a.value - b.value, lambda g: (g, -g))

    def mul(self, a: Var, b: Var) -> Var:
        _same_shape("mul", a, b)
        av, bv = a.value, b.value
        return self._push("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def scale(self, a: Var, c: float) -> Var:
        c = float(c)
        return self._push("scale", (a,), a.value * c, lambda g: (g * c,))

    def sigmoid(self, a: Var) -> Var:
        s = sigmoid(a.value)
        return self._push("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))

    def tanh(self, a: Var) -> Var:
        t = np.tanh(a.value)
        return self._push("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))

    def relu(self, a: Var) -> Var:
        mask = a.value > 0
        return self._push("relu", (a,), np.where(mask, a.value, 0.0),
                          lambda g: (np.where(mask, g, 0.0),))

    def add_bias(self, a: Var, b: Var) -> Var:
        """``a[..., j] + b[j]`` for 2-D ``a``; broadcast along the last axis."""
        if a.value.ndim != 2 or b.shape != a.shape[-1:]:
            raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {a.shape}")
        return self._push("add_bias", (a, b), a.value + b.value,
                          lambda g: (g, g.sum(axis=0)))

    # structural

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
        return self._push("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))

    def row(self, a: Var, i: int) -> Var:
        """Row ``i`` of a 2-D value (or slab ``i`` of any value) along axis 0."""
        shape = a.shape

        def vjp(g: Array) -> tuple[Array]:
            full = np.zeros(shape)
            full[i] = g
            return (full,)

        return self._push("row", (a,), a.value[i].copy(), vjp)

    def stack(self, parts: Sequence[Var]) -> Var:
        if not parts:
            raise ShapeError("stack: no operands")
        first = parts[0].shape
        for p in parts:
            if p.shape != first:
                raise ShapeError(f"stack: shape mismatch {first} vs {p.shape}")
        n = len(parts)
        return self._push("stack", parts, np.stack([p.value for p in parts]),
                          lambda g: tuple(g[i] for i in range(n)))

    def reshape(self, a: Var, shape: Sequence[int]) -> Var:
        old = a.shape
        try:
            out = a.value.reshape(tuple(shape))
        except ValueError as exc:
            raise ShapeError(f"reshape: {old} -> {tuple(shape)}") from exc
        return self._push("reshape", (a,), out, lambda g: (g.reshape(old),))

    def concat_channels(self, parts: Sequence[Var]) -> Var:
        if not parts:
            raise ShapeError("concat_channels: no operands")
        spatial = parts[0].shape[1:]
        for p in parts:
            if p.value.ndim != 3 or p.shape[1:] != spatial:
                raise ShapeError(f"concat_channels: spatial mismatch {spatial} vs {p.shape[1:]}")
        splits = np.cumsum([p.shape[0] for p in parts])[:-1]
        return self._push("concat", parts, np.concatenate([p.value for p in parts], axis=0),
                          lambda g: tuple(np.split(g, splits, axis=0)))

    def sum(self, a: Var) -> Var:
        shape = a.shape
        return self._push("sum", (a,), np.asarray(a.value.sum()),
                          lambda g: (np.full(shape, float(g)),))

    # convolution and pooling

    def conv2d(self, x: Var, kernel: Var, stride: int = 1, pad: int = 0,
               bias: Var | None = None) -> Var:
        """Zero-padded 2-D cross-correlation of ``[Cin,H,W]`` with ``[Cout,Cin,kh,kw]``."""
        xv, kv = x.value, kernel.value
        if xv.ndim != 3 or kv.ndim != 4 or kv.shape[1] != xv.shape[0]:
            raise ShapeError(f"conv2d: input {xv.shape} incompatible with kernel {kv.shape}")
        if stride < 1 or pad < 0:
            raise ShapeError(f"conv2d: stride {stride} / pad {pad} invalid")
        cin, h, w = xv.shape
        cout, _, kh, kw = kv.shape
        hp, wp = h + 2 * pad, w + 2 * pad
        if kh > hp or kw > wp:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
        ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
        if bias is not None and bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")

        xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad))) if pad else xv
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
        kmat = kv.reshape(cout, -1)
        out = (kmat @ cols).reshape(cout, ho, wo)
        if bias is not None:
            out = out + bias.value[:, None, None]

        def vjp(g: Array) -> tuple[Array | None, ...]:
            g2 = g.reshape(cout, ho * wo)
            gk = (g2 @ cols.T).reshape(kv.shape)
            gcols = (kmat.T @ g2).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros((cin, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
            grads: tuple[Array | None, ...] = (gx, gk)
            if bias is not None:
                grads += (g.sum(axis=(1, 2)),)
            return grads

        inputs = (x, kernel) if bias is None else (x, kernel, bias)
        return self._push("conv2d", inputs, out, vjp)

    def pool_avg(self, x: Var, window: int) -> Var:
        c, h, w = x.shape
        if window < 1 or h % window or w % window:
            raise ShapeError(f"pool_avg: {h}x{w} not divisible by window {window}")
        out = x.value.reshape(c, h // window, window, w // window, window).mean(axis=(2, 4))
        area = float(window * window)

        def vjp(g: Array) -> tuple[Array]:
            return (np.repeat(np.repeat(g, window, axis=1), window, axis=2) / area,)

        return self._push("pool_avg", (x,), out, vjp)

    def global_pool_avg(self, x: Var) -> Var:
        if x.value.ndim != 3:
            raise ShapeError(f"global_pool_avg: expected [C,H,W], got {x.shape}")
        c, h, w = x.shape
        return self._push("global_pool_avg", (x,), x.value.mean(axis=(1, 2)),
                          lambda g: (np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)).copy(),))

    # loss

    def bce_with_logits(self, logits: Var, targets: Array) -> Var:
        """Mean binary cross-entropy over all elements, log-sum-exp stable."""
        z = logits.value
        t = np.asarray(targets, dtype=np.float64)
        if t.shape != z.shape:
            raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {t.shape}")
        if not np.all((t == 0.0) | (t == 1.0)):
            raise DomainError("bce_with_logits: targets must be 0 or 1")
        n = z.size
        loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
        resid = (sigmoid(z) - t) / n
        return self._push("bce_with_logits", (logits,), np.asarray(loss.mean()),
                          lambda g: (float(g) * resid,))

    # reverse sweep

    def backward(self, root: Var) -> dict[int, Array]:
        """Gradients of scalar ``root`` w.r.t. every node it depends on.

        Parameter nodes always appear in the result (zeros if unreachable).
        """
        if root.graph is not self:
            raise ContractError("backward: root belongs to another graph")
        if root.value.size != 1:
            raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
        grads: dict[int, Array] = {root.id: np.ones_like(root.value)}
        for nid in range(root.id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.vjp is None:
                continue
            for src, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                prev = grads.get(src)
                grads[src] = gi if prev is None else prev + gi
        for nid, node in enumerate(self.nodes):
            if node.is_param and nid not in grads:
                grads[nid] = np.zeros_like(node.value)
        return grads


LossBuilder = Callable[[Graph, Mapping[str, Var]], Var]


def value_and_grad(loss_fn: LossBuilder, params: Mapping[str, Array]) -> tuple[float, dict[str, Array]]:
    """Evaluate ``loss_fn`` on a fresh graph and return (loss, grads by name)."""
    g = Graph()
    handles = {name: g.param(value) for name, value in params.items()}
    loss = loss_fn(g, handles)
    grads = g.backward(loss)
    return float(loss.value), {name: grads[h.id] for name, h in handles.items()}


def loss_value(loss_fn: LossBuilder, params: Mapping[str, Array]) -> float:
    g = Graph()
    handles = {name: g.param(value) for name, value in params.items()}
    return float(loss_fn(g, handles).value)


def gradient_check(
    loss_fn: LossBuilder,
    params: Mapping[str, Array],
    eps: float = 1e-5,
    *,
    num_coords: int = 200,
    seed: int = 0,
    grad_hook: Callable[[dict[str, Array]], dict[str, Array]] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``num_coords`` coordinates are drawn without replacement (seeded) from the
    concatenation of all parameters; every coordinate is used when there are
    fewer. Relative error is ``|a-n| / max(|a|, |n|, 1e-8)``. ``grad_hook`` may
    rewrite the analytic gradients before comparison (negative controls).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise DomainError(f"gradient_check: eps {eps} outside [1e-7, 1e-3]")
    base = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
    _, grads = value_and_grad(loss_fn, base)
    if grad_hook is not None:
        grads = grad_hook(grads)

    names = list(base)
    sizes = np.array([base[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(num_coords, total), replace=False))

    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, local = names[k], int(flat - offsets[k])
        view = base[name].reshape(-1)
        orig = view[local]
        hi, lo = orig + eps, orig - eps
        view[local] = hi
        f_plus = loss_value(loss_fn, base)
        view[local] = lo
        f_minus = loss_value(loss_fn, base)
        view[local] = orig
        # divide by the realised step; hi - lo is rarely exactly 2*eps in floating point
        numeric = (f_plus - f_minus) / (hi - lo)
        analytic = float(grads[name].reshape(-1)[local])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
