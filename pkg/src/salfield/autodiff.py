"""Minimal dense-tensor reverse-mode autodiff and Adam.

Define-by-run: every forward call records a node on a Graph, and
``backward`` replays the node list in reverse. Tensors are float32 numpy
arrays; explicit reductions (sums, means, bias gradients) accumulate in
float64 before being cast back. Graphs are rebuilt per batch and are not
thread-safe; parameter arrays may be shared read-only across graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

F32 = np.float32


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=F32)
    return np.ascontiguousarray(arr)


class Tensor:
    """Handle to one node's output array inside a Graph."""

    __slots__ = ("graph", "node_id", "data")

    def __init__(self, graph: "Graph", node_id: int, data: np.ndarray):
        self.graph = graph
        self.node_id = node_id
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(node={self.node_id}, shape={self.data.shape})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    out: np.ndarray
    # backward(g_out) -> list of (input node id, grad contribution)
    backward: Optional[Callable]
    param: bool = False
    requires_grad: bool = False


class Graph:
    """Ordered, acyclic record of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, kind, inputs, out, backward, param=False, requires_grad=False) -> Tensor:
        self.nodes.append(Node(kind, tuple(inputs), out, backward, param, requires_grad))
        return Tensor(self, len(self.nodes) - 1, out)

    def constant(self, data) -> Tensor:
        return self._record("leaf", (), _as_f32(data), None)

    def param(self, data) -> Tensor:
        """Leaf whose gradient is collected by backward().

        The array is used as-is (not copied) so optimizer updates to it are
        seen by the next graph built from the same storage.
        """
        arr = np.asarray(data)
        if arr.dtype != F32:
            arr = arr.astype(F32)
        return self._record("leaf", (), arr, None, param=True)

    def input_grad(self, data) -> Tensor:
        """Leaf that is not a parameter but still receives a gradient."""
        return self._record("leaf", (), _as_f32(data), None, requires_grad=True)


class Gradients:
    """Gradient lookup per leaf tensor; absent leaves read as zero."""

    def __init__(self, table: dict):
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._table.get(t.node_id)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self._table


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64).astype(F32)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True, dtype=np.float64).astype(F32)
    return g


# ---------------------------------------------------------------------------
# ops


def affine(g: Graph, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out[n,o] = sum_i x[n,i] * w[i,o] + b[o]"""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"affine shape mismatch: x{x.data.shape} w{w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(f"affine bias shape {b.data.shape} != ({w.data.shape[1]},)")
    out = x.data @ w.data + b.data
    xd, wd = x.data, w.data

    def backward(go):
        return [
            (x.node_id, go @ wd.T),
            (w.node_id, xd.T @ go),
            (b.node_id, go.sum(axis=0, dtype=np.float64).astype(F32)),
        ]

    return g._record("affine", (x.node_id, w.node_id, b.node_id), out, backward)


def _unary(g, kind, x, out, dfn):
    def backward(go):
        return [(x.node_id, dfn(go))]

    return g._record(kind, (x.node_id,), out, backward)


def relu(g: Graph, x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(g, "relu", x, np.where(mask, x.data, F32(0)), lambda go: go * mask)


def tanh(g: Graph, x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(g, "tanh", x, out, lambda go: go * (F32(1) - out * out))


def sigmoid(g: Graph, x: Tensor) -> Tensor:
    out = _sigmoid_stable(x.data)
    return _unary(g, "sigmoid", x, out, lambda go: go * out * (F32(1) - out))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log(g: Graph, x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log domain error: non-positive input")
    out = np.log(x.data)
    return _unary(g, "log", x, out, lambda go: go / x.data)


def exp(g: Graph, x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(g, "exp", x, out, lambda go: go * out)


def neg(g: Graph, x: Tensor) -> Tensor:
    return _unary(g, "neg", x, -x.data, lambda go: -go)


def abs_(g: Graph, x: Tensor) -> Tensor:
    # subgradient 0 at 0 (sign(0) == 0)
    s = np.sign(x.data)
    return _unary(g, "abs", x, np.abs(x.data), lambda go: go * s)


def log_sigmoid(g: Graph, x: Tensor) -> Tensor:
    """log(sigmoid(x)) in softplus form, stable for large |x|."""
    out = np.where(x.data >= 0, -np.log1p(np.exp(-x.data)), x.data - np.log1p(np.exp(x.data))).astype(F32)
    sig = _sigmoid_stable(x.data)
    return _unary(g, "log_sigmoid", x, out, lambda go: go * (F32(1) - sig))


def _binary(g, kind, a, b, out, dfa, dfb):
    def backward(go):
        return [
            (a.node_id, _unbroadcast(dfa(go), a.data.shape)),
            (b.node_id, _unbroadcast(dfb(go), b.data.shape)),
        ]

    return g._record(kind, (a.node_id, b.node_id), out, backward)


def add(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    return _binary(g, "add", a, b, a.data + b.data, lambda go: go, lambda go: go)


def sub(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    return _binary(g, "sub", a, b, a.data - b.data, lambda go: go, lambda go: -go)


def mul(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    return _binary(g, "mul", a, b, a.data * b.data,
                   lambda go: go * b.data, lambda go: go * a.data)


def mul_scalar(g: Graph, x: Tensor, c: float) -> Tensor:
    c = F32(c)
    return _unary(g, "mul_scalar", x, x.data * c, lambda go: go * c)


def pointwise(g: Graph, x: Tensor, kind: str, other: Tensor = None, scalar: float = None) -> Tensor:
    """Dispatch by kind; binary kinds take `other`, mul_scalar takes `scalar`."""
    unary = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "log": log,
             "neg": neg, "abs": abs_, "exp": exp}
    if kind in unary:
        return unary[kind](g, x)
    if kind == "mul_scalar":
        if scalar is None:
            raise ValueError("mul_scalar requires scalar=")
        return mul_scalar(g, x, scalar)
    if kind in ("add", "sub", "mul"):
        if other is None:
            raise ValueError(f"{kind} requires other=")
        return {"add": add, "sub": sub, "mul": mul}[kind](g, x, other)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def clamp_stopgrad(g: Graph, x: Tensor, delta: float) -> Tensor:
    """min(delta, max(-delta, x)); gradient 1 strictly inside, 0 elsewhere."""
    if delta <= 0:
        raise ValueError("clamp delta must be > 0")
    d = F32(delta)
    out = np.clip(x.data, -d, d)
    mask = np.abs(x.data) < d
    return _unary(g, "clamp_stopgrad", x, out, lambda go: go * mask)


def stopgrad(g: Graph, x: Tensor) -> Tensor:
    return g._record("stopgrad", (x.node_id,), x.data, None)


def grad_scale_rows(g: Graph, x: Tensor, scale: np.ndarray) -> Tensor:
    """Identity forward; backward multiplies row i's gradient by scale[i]."""
    s = _as_f32(scale).reshape(-1, 1)
    if s.shape[0] != x.data.shape[0]:
        raise ValueError("grad_scale_rows: scale length mismatch")
    return _unary(g, "grad_scale_rows", x, x.data, lambda go: go * s)


def max_over_points(g: Graph, x: Tensor) -> Tensor:
    """Column-wise max over rows; gradient routed to first argmax row."""
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ValueError("max_over_points needs a nonempty NxC tensor")
    arg = np.argmax(x.data, axis=0)  # first index on ties
    out = x.data[arg, np.arange(x.data.shape[1])]
    shape = x.data.shape

    def backward(go):
        gx = np.zeros(shape, dtype=F32)
        gx[arg, np.arange(shape[1])] = go
        return [(x.node_id, gx)]

    return g._record("max_over_points", (x.node_id,), out, backward)


def concat_columns(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0]:
        raise ValueError("concat_columns: row count mismatch")
    out = np.concatenate([a.data, b.data], axis=1)
    na = a.data.shape[1]

    def backward(go):
        return [(a.node_id, go[:, :na]), (b.node_id, go[:, na:])]

    return g._record("concat_columns", (a.node_id, b.node_id), out, backward)


def concat_rows(g: Graph, parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_rows: empty input")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(go):
        return [(p.node_id, go[offsets[i]:offsets[i + 1]]) for i, p in enumerate(parts)]

    return g._record("concat_rows", tuple(p.node_id for p in parts), out, backward)


def slice_columns(g: Graph, x: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(x.data[:, start:stop])
    shape = x.data.shape

    def backward(go):
        gx = np.zeros(shape, dtype=F32)
        gx[:, start:stop] = go
        return [(x.node_id, gx)]

    return g._record("slice_columns", (x.node_id,), out, backward)


def reshape(g: Graph, x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.data.shape
    return _unary(g, "reshape", x, out, lambda go: go.reshape(orig))


def tile_rows(g: Graph, x: Tensor, n: int) -> Tensor:
    """Repeat a 1-D tensor as n identical rows."""
    if x.data.ndim != 1:
        raise ValueError("tile_rows expects a 1-D tensor")
    out = np.broadcast_to(x.data, (n, x.data.shape[0])).copy()
    return _unary(g, "tile_rows", x, out,
                  lambda go: go.sum(axis=0, dtype=np.float64).astype(F32))


def sum_all(g: Graph, x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=F32)
    shape = x.data.shape
    return _unary(g, "sum_all", x, out, lambda go: np.full(shape, go, dtype=F32))


def mean_all(g: Graph, x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=F32)
    shape = x.data.shape
    return _unary(g, "mean_all", x, out,
                  lambda go: np.full(shape, go / F32(n), dtype=F32))


def bce(g: Graph, pred: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy; predictions clipped to [1e-7, 1-1e-7]."""
    lbl = _as_f32(labels).reshape(-1)
    p = np.clip(pred.data.reshape(-1), F32(1e-7), F32(1 - 1e-7))
    n = p.size
    if lbl.shape != p.shape:
        raise ValueError("bce: label/prediction length mismatch")
    out = np.asarray(
        np.sum(-lbl * np.log(p) - (1 - lbl) * np.log1p(-p), dtype=np.float64) / n,
        dtype=F32)
    shape = pred.data.shape

    def backward(go):
        gp = go * (-lbl / p + (1 - lbl) / (1 - p)) / F32(n)
        return [(pred.node_id, gp.astype(F32).reshape(shape))]

    return g._record("bce", (pred.node_id,), out, backward)


def sigmoid_bce(g: Graph, logits: Tensor, labels) -> Tensor:
    """Mean BCE straight from logits: max(x,0) - x*l + log(1+exp(-|x|))."""
    lbl = _as_f32(labels).reshape(-1)
    x = logits.data.reshape(-1)
    n = x.size
    per = np.maximum(x, 0) - x * lbl + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.sum(dtype=np.float64) / n, dtype=F32)
    sig = _sigmoid_stable(x)
    shape = logits.data.shape

    def backward(go):
        return [(logits.node_id, (go * (sig - lbl) / F32(n)).reshape(shape))]

    return g._record("sigmoid_bce", (logits.node_id,), out, backward)


def softmax_xent(g: Graph, logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over rows of logits against integer labels."""
    lbl = np.asarray(labels, dtype=np.int64).reshape(-1)
    x = logits.data
    if x.ndim != 2 or lbl.shape[0] != x.shape[0]:
        raise ValueError("softmax_xent: shape mismatch")
    m = x.max(axis=1, keepdims=True)
    ex = np.exp(x - m)
    denom = ex.sum(axis=1, keepdims=True)
    probs = ex / denom
    logp = (x - m) - np.log(denom)
    n = x.shape[0]
    out = np.asarray(-logp[np.arange(n), lbl].sum(dtype=np.float64) / n, dtype=F32)

    def backward(go):
        gx = probs.copy()
        gx[np.arange(n), lbl] -= 1
        return [(logits.node_id, (gx * (go / F32(n))).astype(F32))]

    return g._record("softmax_xent", (logits.node_id,), out, backward)


def backward(g: Graph, loss: Tensor) -> Gradients:
    """Reverse-mode gradients of a scalar loss for all param/input leaves."""
    if loss.data.size != 1:
        raise ValueError("backward: loss must be scalar")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        go = grads.get(nid)
        if go is None:
            continue
        node = g.nodes[nid]
        if node.backward is None:
            continue
        for iid, contrib in node.backward(go):
            prev = grads.get(iid)
            if prev is None:
                grads[iid] = contrib.astype(F32, copy=False).reshape(g.nodes[iid].out.shape)
            else:
                grads[iid] = prev + contrib.astype(F32, copy=False).reshape(prev.shape)
    table = {nid: gr for nid, gr in grads.items()
             if g.nodes[nid].param or g.nodes[nid].requires_grad}
    return Gradients(table)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second-moment accumulators for one list of parameter arrays."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: list, grads: list, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on params and state."""
    if len(params) != len(state.m):
        raise ValueError("adam_step: state/parameter count mismatch")
    state.step += 1
    b1, b2 = F32(state.beta1), F32(state.beta2)
    c1 = F32(1.0 - state.beta1 ** state.step)
    c2 = F32(1.0 - state.beta2 ** state.step)
    lr = F32(lr)
    eps = F32(state.eps)
    for p, gr, m, v in zip(params, grads, state.m, state.v):
        if p.shape != gr.shape:
            raise ValueError(f"adam_step: grad shape {gr.shape} != param shape {p.shape}")
        m *= b1
        m += (F32(1) - b1) * gr
        v *= b2
        v += (F32(1) - b2) * gr * gr
        mhat = m / c1
        vhat = v / c2
        p -= lr * mhat / (np.sqrt(vhat) + eps)
