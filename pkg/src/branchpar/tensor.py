"""Tape-based reverse-mode autodiff over numpy arrays.

Design notes
------------
* A ``Graph`` is an append-only tape. Node ids are assigned in creation
  order, so the creation order *is* a topological order and the backward
  sweep simply walks ids downward. Gradient contributions accumulate into
  per-node slots with ``+=`` in sweep order, which is fixed and
  deterministic: identical inputs give bit-identical gradients.
* Values are 64-bit floats by default; 32-bit tensors work the same way
  (the dtype of the inputs is preserved).
* In verify mode (the default) every operation checks its output for
  NaN/Inf and raises ``NumericsError`` instead of propagating garbage.
  ``bench_mode()`` disables the check for timing runs.
* ``Graph.sweep(lo, hi)`` runs the backward pass over a contiguous id
  range only. Distributed schedules use this to interleave collective
  communication with segments of the backward pass; ``backward()`` is the
  ordinary full sweep.
* Each graph counts multiply-add work (``graph.madds``) for the matmul-like
  ops it records. The analytic cost model is cross-checked against this
  counter.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericsError

_state = threading.local()


def _numerics_enabled() -> bool:
    return getattr(_state, "check_numerics", True)


@contextlib.contextmanager
def bench_mode():
    """Disable per-op NaN/Inf checking inside the context (timing runs)."""
    prev = _numerics_enabled()
    _state.check_numerics = False
    try:
        yield
    finally:
        _state.check_numerics = prev


def _check_finite(value: np.ndarray, kind: str) -> None:
    if _numerics_enabled() and not np.all(np.isfinite(value)):
        raise NumericsError(f"non-finite value produced by op '{kind}'")


class Node:
    """One tape entry: op kind, parent node ids and the backward closure."""

    __slots__ = ("kind", "parents", "backward")

    def __init__(self, kind, parents, backward):
        self.kind = kind
        self.parents = parents
        self.backward = backward


class Graph:
    """Append-only autodiff tape. One execution context per graph."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self.madds: int = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def mark(self) -> int:
        """Current node count; pairs of marks delimit sweep segments."""
        return len(self.nodes)

    def leaf(self, data) -> "Tensor":
        data = np.asarray(data)
        if data.dtype not in (np.float64, np.float32):
            data = data.astype(np.float64)
        _check_finite(data, "leaf")
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), None))
        return Tensor(data, self, nid)

    def record(self, kind, value, parents, backward) -> "Tensor":
        _check_finite(value, kind)
        nid = len(self.nodes)
        self.nodes.append(Node(kind, parents, backward))
        return Tensor(value, self, nid)

    # -- gradient slots -------------------------------------------------

    def accum(self, nid: int, contribution: np.ndarray) -> None:
        slot = self.grads.get(nid)
        if slot is None:
            self.grads[nid] = np.array(contribution, copy=True)
        else:
            slot += contribution

    def grad(self, t: "Tensor") -> np.ndarray:
        """Gradient of ``t``; zeros if nothing has reached it."""
        g = self.grads.get(t.nid)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def set_grad(self, t: "Tensor", g: np.ndarray) -> None:
        if g.shape != t.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {t.data.shape}"
            )
        self.grads[t.nid] = np.array(g, copy=True)

    def seed(self, t: "Tensor", g) -> None:
        """Add an externally supplied gradient contribution to ``t``."""
        g = np.asarray(g, dtype=t.data.dtype)
        if g.shape != t.data.shape:
            raise DimensionError(
                f"seed shape {g.shape} does not match tensor shape {t.data.shape}"
            )
        self.accum(t.nid, g)

    # -- backward sweeps -------------------------------------------------

    def sweep(self, lo: int, hi: int) -> None:
        """Backward over node ids in [lo, hi), highest id first.

        Gradients already sitting in slots inside the range propagate to
        parents (which may lie below ``lo``). Slots outside the range are
        only ever added to.
        """
        for nid in range(hi - 1, lo - 1, -1):
            g = self.grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is not None:
                node.backward(g)

    def backward(self, loss: "Tensor") -> None:
        """Full reverse sweep from a scalar loss node."""
        if loss.graph is not self:
            raise ContractError("loss tensor belongs to a different graph")
        if loss.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        self.seed(loss, np.asarray(1.0, dtype=loss.data.dtype))
        self.sweep(0, loss.nid + 1)


class Tensor:
    """A numpy array plus an optional position on an autodiff tape."""

    __slots__ = ("data", "graph", "nid")

    def __init__(self, data: np.ndarray, graph: Graph | None = None, nid: int | None = None):
        self.data = data
        self.graph = graph
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, nid={self.nid})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _graph_of(*tensors: Tensor) -> Graph:
    graphs = {id(t.graph): t.graph for t in tensors if t.graph is not None}
    if len(graphs) > 1:
        raise ContractError("operands live on different graphs")
    if not graphs:
        raise ContractError("at least one operand must be attached to a graph")
    return next(iter(graphs.values()))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    value = a.data + b.data

    def backward(grad):
        g.accum(a.nid, _unbroadcast(grad, a.data.shape))
        g.accum(b.nid, _unbroadcast(grad, b.data.shape))

    return g.record("add", value, (a.nid, b.nid), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    value = a.data - b.data

    def backward(grad):
        g.accum(a.nid, _unbroadcast(grad, a.data.shape))
        g.accum(b.nid, _unbroadcast(-grad, b.data.shape))

    return g.record("sub", value, (a.nid, b.nid), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    value = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(grad):
        g.accum(a.nid, _unbroadcast(grad * b_data, a_data.shape))
        g.accum(b.nid, _unbroadcast(grad * a_data, b_data.shape))

    return g.record("mul", value, (a.nid, b.nid), backward)


def scale(a: Tensor, c: float) -> Tensor:
    g = _graph_of(a)
    c = float(c)
    value = a.data * c

    def backward(grad):
        g.accum(a.nid, grad * c)

    return g.record("scale", value, (a.nid,), backward)


def sigmoid(a: Tensor) -> Tensor:
    g = _graph_of(a)
    x = a.data
    value = np.empty_like(x)
    pos = x >= 0
    value[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    value[~pos] = ex / (1.0 + ex)

    def backward(grad):
        g.accum(a.nid, grad * value * (1.0 - value))

    return g.record("sigmoid", value, (a.nid,), backward)


def relu(a: Tensor) -> Tensor:
    g = _graph_of(a)
    value = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def backward(grad):
        g.accum(a.nid, grad * mask)

    return g.record("relu", value, (a.nid,), backward)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}"
        )
    value = np.matmul(a.data, b.data)
    m, n = value.shape[-2], value.shape[-1]
    k = a.data.shape[-1]
    g.madds += 2 * (value.size // (m * n)) * m * n * k
    a_data, b_data = a.data, b.data

    def backward(grad):
        da = np.matmul(grad, np.swapaxes(b_data, -1, -2))
        db = np.matmul(np.swapaxes(a_data, -1, -2), grad)
        g.accum(a.nid, _unbroadcast(da, a_data.shape))
        g.accum(b.nid, _unbroadcast(db, b_data.shape))

    return g.record("matmul", value, (a.nid, b.nid), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ w + b``.

    ``x`` has shape [..., d_in], ``w`` [d_in, d_out], ``b`` [d_out] or None.
    """
    g = _graph_of(x, w)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"linear expects x[..., {w.data.shape[0] if w.data.ndim == 2 else '?'}]"
            f" @ w{w.data.shape}, got x{x.data.shape}"
        )
    value = np.matmul(x.data, w.data)
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise DimensionError(
                f"linear bias shape {b.data.shape} != ({w.data.shape[1]},)"
            )
        value = value + b.data
    d_in, d_out = w.data.shape
    g.madds += 2 * (x.data.size // d_in) * d_in * d_out
    x_data, w_data = x.data, w.data
    parents = (x.nid, w.nid) if b is None else (x.nid, w.nid, b.nid)

    def backward(grad):
        g.accum(x.nid, np.matmul(grad, w_data.T))
        x2 = x_data.reshape(-1, d_in)
        g2 = grad.reshape(-1, d_out)
        g.accum(w.nid, x2.T @ g2)
        if b is not None:
            g.accum(b.nid, g2.sum(axis=0))

    return g.record("linear", value, parents, backward)


# ---------------------------------------------------------------------------
# normalization and reductions
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    g = _graph_of(a)
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    value = ex / np.sum(ex, axis=axis, keepdims=True)

    def backward(grad):
        inner = np.sum(grad * value, axis=axis, keepdims=True)
        g.accum(a.nid, value * (grad - inner))

    return g.record("softmax", value, (a.nid,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    g = _graph_of(x, gamma, beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm scale/shift must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = xhat * gamma.data + beta.data
    gamma_data = gamma.data

    def backward(grad):
        dxhat = grad * gamma_data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        g.accum(x.nid, inv * (dxhat - m1 - xhat * m2))
        lead = (-1, d)
        g.accum(gamma.nid, (grad * xhat).reshape(lead).sum(axis=0))
        g.accum(beta.nid, grad.reshape(lead).sum(axis=0))

    return g.record("layer_norm", value, (x.nid, gamma.nid, beta.nid), backward)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over one axis, or over all elements when ``axis`` is None."""
    g = _graph_of(a)
    shape = a.data.shape
    if axis is None:
        value = np.mean(a.data)
        count = a.data.size

        def backward(grad):
            g.accum(a.nid, np.full(shape, grad / count, dtype=a.data.dtype))

        return g.record("reduce_mean", value, (a.nid,), backward)

    value = np.mean(a.data, axis=axis)
    count = shape[axis]

    def backward(grad):
        g.accum(a.nid, np.broadcast_to(
            np.expand_dims(grad / count, axis), shape).copy())

    return g.record("reduce_mean", value, (a.nid,), backward)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    g = _graph_of(a)
    shape = a.data.shape
    if axis is None:
        value = np.sum(a.data)

        def backward(grad):
            g.accum(a.nid, np.full(shape, grad, dtype=a.data.dtype))

        return g.record("reduce_sum", value, (a.nid,), backward)

    value = np.sum(a.data, axis=axis)

    def backward(grad):
        g.accum(a.nid, np.broadcast_to(np.expand_dims(grad, axis), shape).copy())

    return g.record("reduce_sum", value, (a.nid,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def permute(a: Tensor, axes: tuple) -> Tensor:
    g = _graph_of(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for shape {a.data.shape}")
    value = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(grad):
        g.accum(a.nid, np.transpose(grad, inverse))

    return g.record("permute", value, (a.nid,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    g = _graph_of(a)
    shape = tuple(shape)
    value = np.reshape(a.data, shape)
    old_shape = a.data.shape

    def backward(grad):
        g.accum(a.nid, grad.reshape(old_shape))

    return g.record("reshape", value, (a.nid,), backward)


def slice_axis(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    """Contiguous slice [lo, hi) along one axis."""
    g = _graph_of(a)
    n = a.data.shape[axis]
    if not (0 <= lo < hi <= n):
        raise DimensionError(f"slice [{lo}, {hi}) out of range for axis of size {n}")
    index = tuple(slice(None) if i != axis else slice(lo, hi)
                  for i in range(a.data.ndim))
    value = np.ascontiguousarray(a.data[index])
    full_shape = a.data.shape

    def backward(grad):
        out = np.zeros(full_shape, dtype=grad.dtype)
        out[index] = grad
        g.accum(a.nid, out)

    return g.record("slice", value, (a.nid,), backward)


# ---------------------------------------------------------------------------
# custom ops (extension point for the distributed schedules)
# ---------------------------------------------------------------------------

def custom_op(kind: str, value: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Record an externally computed op on the inputs' graph.

    ``backward(grad)`` must push contributions into the graph itself via
    ``graph.accum``; this is how collective-communication ops join the tape.
    """
    g = _graph_of(*inputs)
    return g.record(kind, value, tuple(t.nid for t in inputs), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    worst: tuple = ()
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_err <= self.tol

    def __str__(self):
        flag = "ok" if self.passed else "FAIL"
        return (f"grad_check: max_rel_err={self.max_rel_err:.3e} over "
                f"{self.n_checked} coords (tol={self.tol:.1e}) [{flag}]")


def grad_check(f, inputs, h: float = 1e-5, n: int = 32, seed: int = 0,
               tol: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` maps a list of Tensors (leaves of a fresh graph) to a scalar
    Tensor. ``n`` coordinates are sampled per input with a seeded RNG.
    The relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]

    def run(values):
        g = Graph()
        leaves = [g.leaf(v) for v in values]
        out = f(*leaves)
        if out.data.shape != ():
            raise ContractError("grad_check target must return a scalar")
        return g, leaves, out

    g, leaves, out = run(arrays)
    g.backward(out)
    analytic = [g.grad(t) for t in leaves]

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    checked = 0
    worst = ()
    for i, base in enumerate(arrays):
        size = base.size
        coords = rng.choice(size, size=min(n, size), replace=False)
        for c in coords:
            idx = np.unravel_index(c, base.shape) if base.shape else ()
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            f_plus = run(plus)[2].data
            f_minus = run(minus)[2].data
            numeric = (f_plus - f_minus) / (2.0 * h)
            a_val = analytic[i][idx] if base.shape else float(analytic[i])
            rel = abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1.0)
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (i, idx, float(a_val), float(numeric))
    return GradCheckReport(max_rel_err=float(max_rel), n_checked=checked,
                           tol=tol, worst=worst)
