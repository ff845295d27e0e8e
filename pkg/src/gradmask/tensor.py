"""Dense float64 tensors with a per-pass reverse-mode tape.

A `Graph` records every operation of one forward pass in execution order,
which is already a topological order, so the backward pass is a single
reversed sweep. Tensors are immutable once created; gradients accumulate
by summation and are owned by the caller between passes.

Two operators here carry the training semantics the rest of the package
depends on:

* `stop_gradient` - identity forward, contributes exactly zero backward.
* `gradient_gate` - identity forward; backward keeps the incoming
  gradient row at time t iff ``keep[t]`` and replaces it with exact
  zeros otherwise.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Tape misuse, e.g. a second backward without a new forward."""


def _as_f64(value) -> np.ndarray:
    return np.ascontiguousarray(value, dtype=np.float64)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    """A node in one graph: value, optional gradient, stable node id."""

    __slots__ = ("graph", "node_id", "data", "grad", "requires_grad")

    def __init__(self, graph: "Graph", node_id: int, data: np.ndarray, requires_grad: bool):
        self.graph = graph
        self.node_id = node_id
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul_elementwise(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


class Graph:
    """Tape for one forward/backward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._backfns: list = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        """Register an input tensor (parameter or constant)."""
        arr = _as_f64(data)
        _check_finite(arr, "leaf")
        return self._register(arr, requires_grad, None)

    def _register(self, data: np.ndarray, requires_grad: bool, backfn) -> Tensor:
        t = Tensor(self, len(self._nodes), data, requires_grad)
        self._nodes.append(t)
        self._backfns.append(backfn)
        return t

    def backward(self, loss: Tensor, grad_scale: float = 1.0) -> None:
        """Run the reversed sweep from a scalar `loss`.

        `grad_scale` seeds d(loss)/d(loss); callers averaging losses over a
        batch of graphs pass 1/B here. A graph can only be swept once.
        """
        if loss.graph is not self:
            raise GraphError("loss tensor belongs to a different graph")
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; record a new forward pass")
        self._consumed = True
        loss.grad = np.array(float(grad_scale))
        for i in range(len(self._nodes) - 1, -1, -1):
            fn = self._backfns[i]
            node = self._nodes[i]
            if fn is None or node.grad is None:
                continue
            fn(node.grad)


def _same_graph(*ts: Tensor) -> Graph:
    g = ts[0].graph
    for t in ts[1:]:
        if t.graph is not g:
            raise GraphError("operands recorded on different graphs")
    if g._consumed:
        raise GraphError("graph already swept; record a new forward pass")
    return g


def _unary(g: Graph, out: np.ndarray, op: str, x: Tensor, backfn) -> Tensor:
    _check_finite(out, op)
    req = x.requires_grad
    return g._register(out, req, backfn if req else None)


def _binary(g: Graph, out: np.ndarray, op: str, backfn, req: bool) -> Tensor:
    _check_finite(out, op)
    return g._register(out, req, backfn if req else None)


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def backfn(grad):
        if a.requires_grad:
            a._accum(grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ grad)

    return _binary(g, out, "matmul", backfn, a.requires_grad or b.requires_grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backfn(grad):
        if a.requires_grad:
            a._accum(grad)
        if b.requires_grad:
            b._accum(grad)

    return _binary(g, out, "add", backfn, a.requires_grad or b.requires_grad)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias over the last axis of `a`."""
    g = _same_graph(a, b)
    if b.data.ndim != 1 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backfn(grad):
        if a.requires_grad:
            a._accum(grad)
        if b.requires_grad:
            axes = tuple(range(grad.ndim - 1))
            b._accum(grad.sum(axis=axes))

    return _binary(g, out, "add_bias", backfn, a.requires_grad or b.requires_grad)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul_elementwise {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def backfn(grad):
        if a.requires_grad:
            a._accum(grad * b.data)
        if b.requires_grad:
            b._accum(grad * a.data)

    return _binary(g, out, "mul_elementwise", backfn, a.requires_grad or b.requires_grad)


def scale(a: Tensor, c: float) -> Tensor:
    g = _same_graph(a)
    c = float(c)
    out = a.data * c

    def backfn(grad):
        a._accum(grad * c)

    return _unary(g, out, "scale", a, backfn)


def tanh(a: Tensor) -> Tensor:
    g = _same_graph(a)
    out = np.tanh(a.data)

    def backfn(grad):
        a._accum(grad * (1.0 - out * out))

    return _unary(g, out, "tanh", a, backfn)


def relu(a: Tensor) -> Tensor:
    g = _same_graph(a)
    out = np.maximum(a.data, 0.0)

    def backfn(grad):
        a._accum(np.where(a.data > 0.0, grad, 0.0))

    return _unary(g, out, "relu", a, backfn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    g = _same_graph(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def backfn(grad):
        a._accum(grad - np.exp(out) * grad.sum(axis=axis, keepdims=True))

    return _unary(g, out, "log_softmax", a, backfn)


def embed_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of a (V, E) table; duplicate indices sum their gradients."""
    g = _same_graph(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embed_lookup indices must be 1-D, got {idx.shape}")
    if table.data.ndim != 2:
        raise ShapeError(f"embed_lookup table must be 2-D, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError("embed_lookup index out of range")
    out = table.data[idx]

    def backfn(grad):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, grad)
        table._accum(acc)

    return _unary(g, out, "embed_lookup", table, backfn)


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    g = _same_graph(a, b)
    try:
        out = np.concatenate([a.data, b.data], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    n = a.data.shape[axis]

    def backfn(grad):
        ga, gb = np.split(grad, [n], axis=axis)
        if a.requires_grad:
            a._accum(ga)
        if b.requires_grad:
            b._accum(gb)

    return _binary(g, out, "concat", backfn, a.requires_grad or b.requires_grad)


def concat_rows(ts: Sequence[Tensor]) -> Tensor:
    """Stack row tensors (each (1, D)) into an (n, D) tensor."""
    if not ts:
        raise ShapeError("concat_rows of nothing")
    g = _same_graph(*ts)
    out = np.concatenate([t.data for t in ts], axis=0)
    offsets = np.cumsum([t.data.shape[0] for t in ts])[:-1]

    def backfn(grad):
        for t, piece in zip(ts, np.split(grad, offsets, axis=0)):
            if t.requires_grad:
                t._accum(piece)

    return _binary(g, out, "concat_rows", backfn, any(t.requires_grad for t in ts))


def slice_time(a: Tensor, t0: int, t1: int) -> Tensor:
    g = _same_graph(a)
    if not (0 <= t0 <= t1 <= a.data.shape[0]):
        raise ShapeError(f"slice_time [{t0}:{t1}] on length {a.data.shape[0]}")
    out = a.data[t0:t1]

    def backfn(grad):
        acc = np.zeros_like(a.data)
        acc[t0:t1] = grad
        a._accum(acc)

    return _unary(g, out, "slice_time", a, backfn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    g = _same_graph(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def backfn(grad):
        a._accum(grad.reshape(a.data.shape))

    return _unary(g, out, "reshape", a, backfn)


def pairwise_sum(a: Tensor, b: Tensor) -> Tensor:
    """Outer sum of row sets: (T, H) + (U, H) -> (T, U, H)."""
    g = _same_graph(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"pairwise_sum {a.data.shape} vs {b.data.shape}")
    out = a.data[:, None, :] + b.data[None, :, :]

    def backfn(grad):
        if a.requires_grad:
            a._accum(grad.sum(axis=1))
        if b.requires_grad:
            b._accum(grad.sum(axis=0))

    return _binary(g, out, "pairwise_sum", backfn, a.requires_grad or b.requires_grad)


def sum_all(a: Tensor) -> Tensor:
    g = _same_graph(a)
    out = np.asarray(a.data.sum())

    def backfn(grad):
        a._accum(np.broadcast_to(grad, a.data.shape).copy())

    return _unary(g, out, "sum_all", a, backfn)


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Temporal convolution with zero 'same' padding.

    x: (T, Cin), w: (k, Cin, Cout), b: (Cout,) -> (T, Cout). Implemented as
    k shifted matmuls so the tape stays one node per layer.
    """
    g = _same_graph(x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 3 or b.data.ndim != 1:
        raise ShapeError("conv1d_same expects x (T,Cin), w (k,Cin,Cout), b (Cout,)")
    k, cin, cout = w.data.shape
    if x.data.shape[1] != cin or b.data.shape[0] != cout:
        raise ShapeError(f"conv1d_same {x.data.shape} * {w.data.shape} + {b.data.shape}")
    if k % 2 != 1:
        raise ShapeError("conv1d_same kernel width must be odd")
    T = x.data.shape[0]
    pad = k // 2
    xp = np.zeros((T + 2 * pad, cin))
    xp[pad : pad + T] = x.data
    out = np.tile(b.data, (T, 1))
    for i in range(k):
        out += xp[i : i + T] @ w.data[i]

    def backfn(grad):
        if b.requires_grad:
            b._accum(grad.sum(axis=0))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                gw[i] = xp[i : i + T].T @ grad
            w._accum(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[i : i + T] += grad @ w.data[i].T
            x._accum(gxp[pad : pad + T])

    req = x.requires_grad or w.requires_grad or b.requires_grad
    return _binary(g, out, "conv1d_same", backfn, req)


# ---------------------------------------------------------------------------
# gradient-routing ops


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; the backward edge into `x` carries exactly zero."""
    g = _same_graph(x)
    return g._register(x.data, False, None)


def gradient_gate(x: Tensor, keep) -> Tensor:
    """Identity forward; backward passes row t iff ``keep[t]``, else zeros.

    `x` is (T, ...) and `keep` a boolean sequence of length T. Blocked rows
    contribute exact zeros, not small values.
    """
    g = _same_graph(x)
    keep_arr = np.asarray(keep, dtype=bool)
    if keep_arr.ndim != 1 or keep_arr.shape[0] != x.data.shape[0]:
        raise ShapeError(
            f"gradient_gate keep length {keep_arr.shape} vs time axis {x.data.shape[0]}"
        )
    mask = keep_arr.reshape((-1,) + (1,) * (x.data.ndim - 1))

    def backfn(grad):
        x._accum(np.where(mask, grad, 0.0))

    return _unary(g, x.data, "gradient_gate", x, backfn)


def replace_rows(x: Tensor, mask, row: Tensor) -> Tensor:
    """Substitute `row` for the rows of `x` selected by a boolean mask.

    Gradient to `row` is the sum over selected rows; gradient to `x` is the
    incoming gradient with selected rows zeroed.
    """
    g = _same_graph(x, row)
    mask_arr = np.asarray(mask, dtype=bool)
    if x.data.ndim != 2 or row.data.ndim != 1:
        raise ShapeError("replace_rows expects x (T,F) and row (F,)")
    if mask_arr.ndim != 1 or mask_arr.shape[0] != x.data.shape[0]:
        raise ShapeError(f"replace_rows mask length {mask_arr.shape} vs T {x.data.shape[0]}")
    if row.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"replace_rows row dim {row.data.shape} vs F {x.data.shape[1]}")
    col = mask_arr[:, None]
    out = np.where(col, row.data[None, :], x.data)

    def backfn(grad):
        if row.requires_grad and mask_arr.any():
            row._accum(grad[mask_arr].sum(axis=0))
        if x.requires_grad:
            x._accum(np.where(col, 0.0, grad))

    return _binary(g, out, "replace_rows", backfn, x.requires_grad or row.requires_grad)


def attach_scalar(x: Tensor, value: float, grad_wrt_x: np.ndarray) -> Tensor:
    """Record an externally computed scalar function of `x` on the tape.

    Used for losses whose gradient is produced analytically (the lattice
    loss): forward value is `value`, backward adds ``g * grad_wrt_x`` into
    `x`. The gradient array is captured as-is and must not be mutated.
    """
    g = _same_graph(x)
    out = np.asarray(float(value))
    if grad_wrt_x.shape != x.data.shape:
        raise ShapeError(f"attach_scalar grad shape {grad_wrt_x.shape} vs {x.data.shape}")

    def backfn(grad):
        x._accum(grad_wrt_x * float(grad))

    return _unary(g, out, "attach_scalar", x, backfn)
