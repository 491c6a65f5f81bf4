"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 by default, float64 for gradient-check
builds). Every tracked operation appends one node to the active graph; node
ids grow with insertion, so the insertion order is already topological and
the backward pass is a single reverse sweep. One graph lives per forward
pass and is freed by ``backward``.

Broadcasting is deliberately restricted: operands must have equal shapes,
be scalars, or be a per-channel (1, C, 1, 1) parameter against an
(N, C, H, W) activation. Anything else is a shape error.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import NonFiniteError

DEFAULT_DTYPE = np.float32
MAX_RANK = 4

# floor applied to log arguments and division denominators
EPS_FLOOR = 1e-12

_grad_enabled = True
_debug_nan = False


def set_debug_nan(flag: bool) -> None:
    """Make any NaN/Inf produced by a forward op raise NonFiniteError."""
    global _debug_nan
    _debug_nan = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One recorded operation: its inputs, output, and gradient rule."""

    __slots__ = ("op", "input_ids", "inputs", "out", "backward_fn")

    def __init__(self, op, input_ids, inputs, out, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Append-only computation graph; insertion order is topological."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def add(self, op: str, inputs: Sequence["Tensor"], out: "Tensor",
            backward_fn: Optional[Callable[[np.ndarray], None]]) -> int:
        nid = len(self.nodes)
        # untracked constants carry no id and sit outside the graph
        input_ids = tuple(t._node_id for t in inputs if t._node_id is not None)
        if any(i >= nid for i in input_ids):
            raise AssertionError(f"graph acyclicity violated at node {nid} ({op})")
        self.nodes.append(Node(op, input_ids, tuple(inputs), out, backward_fn))
        return nid


_active_graph: Optional[Graph] = None


def _current_graph() -> Graph:
    global _active_graph
    if _active_graph is None:
        _active_graph = Graph()
    return _active_graph


def _clear_graph() -> None:
    global _active_graph
    if _active_graph is not None:
        for node in _active_graph.nodes:
            node.out._node_id = None
            node.out._graph = None
            for t in node.inputs:
                t._node_id = None
                t._graph = None
    _active_graph = None


ArrayLike = Union[np.ndarray, float, int, list, tuple]


class Tensor:
    """N-dimensional value array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_node_id", "_graph")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype=None) -> None:
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and \
                data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)  # keep the caller's precision (no copy)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds supported maximum {MAX_RANK}")
        if arr.size == 0:
            raise ValueError("empty tensors are not supported")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node_id: Optional[int] = None
        self._graph: Optional[Graph] = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # -- graph plumbing -------------------------------------------------------

    def _tracked(self) -> bool:
        return self._graph is _active_graph and self._node_id is not None \
            and _active_graph is not None

    def tracked(self) -> bool:
        """True when this tensor participates in the active graph (composite
        ops use this to skip gradient work for constant inputs)."""
        return self._tracked()

    def _ensure_leaf(self) -> None:
        if self.requires_grad and not self._tracked():
            g = _current_graph()
            self._node_id = g.add("leaf", (), self, None)
            self._graph = g

    def backward(self) -> None:
        """Reverse sweep from a scalar loss; frees the graph afterwards."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self._tracked():
            raise RuntimeError("backward() called without a live graph "
                               "(already consumed, or loss is untracked)")
        graph = _active_graph
        self.grad = np.ones_like(self.data)
        for node in reversed(graph.nodes):
            if node.backward_fn is None:
                continue
            out_grad = node.out.grad
            if out_grad is None:
                continue
            node.backward_fn(out_grad)
        _clear_graph()

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other):
        return _binary_elementwise("add", self, other,
                                   lambda a, b: a + b,
                                   lambda g, a, b: g,
                                   lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary_elementwise("sub", self, other,
                                   lambda a, b: a - b,
                                   lambda g, a, b: g,
                                   lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary_elementwise("rsub", self, other,
                                   lambda a, b: b - a,
                                   lambda g, a, b: -g,
                                   lambda g, a, b: g)

    def __mul__(self, other):
        return _binary_elementwise("mul", self, other,
                                   lambda a, b: a * b,
                                   lambda g, a, b: g * b,
                                   lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        # denominator floored away from zero for loss stability
        def fwd(a, b):
            return a / _floor_denominator(b)

        return _binary_elementwise("div", self, other, fwd,
                                   lambda g, a, b: g / _floor_denominator(b),
                                   lambda g, a, b: -g * a / _floor_denominator(b) ** 2)

    def __neg__(self):
        return _unary("neg", self, lambda a: -a, lambda g, a, out: -g)

    # -- matrix product -------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise TypeError("matmul expects a Tensor operand")
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError(f"matmul needs rank-2 operands, got {self.shape} and {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"matmul inner dimensions disagree: {self.shape} vs {other.shape}")

        a, b = self, other

        def backward(g):
            if a._tracked():
                _accumulate(a, g @ b.data.T)
            if b._tracked():
                _accumulate(b, a.data.T @ g)

        return _record("matmul", (a, b), a.data @ b.data, backward)

    def __matmul__(self, other):
        return self.matmul(other)

    # -- reductions -----------------------------------------------------------

    def sum(self, axes=None) -> "Tensor":
        return _reduce("sum", self, axes, mean=False)

    def mean(self, axes=None) -> "Tensor":
        return _reduce("mean", self, axes, mean=True)

    # -- elementwise functions ------------------------------------------------

    def relu(self) -> "Tensor":
        return _unary("relu", self,
                      lambda a: np.maximum(a, 0),
                      lambda g, a, out: g * (a > 0))

    def sigmoid(self) -> "Tensor":
        def fwd(a):
            out = np.empty_like(a)
            pos = a >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
            ea = np.exp(a[~pos])
            out[~pos] = ea / (1.0 + ea)
            return out

        return _unary("sigmoid", self, fwd,
                      lambda g, a, out: g * out * (1.0 - out))

    def exp(self) -> "Tensor":
        return _unary("exp", self, np.exp, lambda g, a, out: g * out)

    def log(self) -> "Tensor":
        def fwd(a):
            floored = np.maximum(a, EPS_FLOOR)
            if np.any(floored <= 0):
                raise ValueError("log of non-positive value after flooring")
            return np.log(floored)

        return _unary("log", self, fwd,
                      lambda g, a, out: g / np.maximum(a, EPS_FLOOR))

    def clamp(self, lo: float, hi: float) -> "Tensor":
        if lo > hi:
            raise ValueError(f"clamp bounds reversed: {lo} > {hi}")

        def backward_local(g, a, out):
            return g * ((a >= lo) & (a <= hi))

        return _unary("clamp", self, lambda a: np.clip(a, lo, hi), backward_local)


# -- op recording helpers -----------------------------------------------------


def _floor_denominator(b):
    """Push |denominator| up to EPS_FLOOR, treating exact zero as positive."""
    if not isinstance(b, np.ndarray):
        s = -1.0 if b < 0 else 1.0
        return s * max(abs(b), EPS_FLOOR)
    sign = np.where(b < 0, -1, 1).astype(b.dtype)
    return sign * np.maximum(np.abs(b), EPS_FLOOR)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if _debug_nan and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in forward result of '{op}'")


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn) -> Tensor:
    """Wrap a forward result; register a graph node when tracking applies."""
    _check_finite(op, out_data)
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad or t._tracked() for t in inputs):
        for t in inputs:
            t._ensure_leaf()
        g = _current_graph()
        out._node_id = g.add(op, inputs, out, backward_fn)
        out._graph = g
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _is_scalar_shape(shape: tuple) -> bool:
    return len(shape) <= 1 and int(np.prod(shape, dtype=np.int64)) == 1


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    """Allow equal shapes, a scalar operand, or a (1,C,1,1) channel parameter."""
    if sa == sb or _is_scalar_shape(sa) or _is_scalar_shape(sb):
        return
    if len(sa) == 4 and sb == (1, sa[1], 1, 1):
        return
    if len(sb) == 4 and sa == (1, sb[1], 1, 1):
        return
    raise ValueError(f"shape mismatch: {sa} vs {sb} "
                     "(only equal shapes, scalars, or (1,C,1,1) channel "
                     "parameters broadcast)")


def _reduce_to(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Collapse a full-shape gradient back onto a broadcast operand."""
    if g.shape == shape:
        return g
    if _is_scalar_shape(shape):
        return g.sum().reshape(shape)
    return g.sum(axis=(0, 2, 3), keepdims=True)  # (1,C,1,1) case


def _binary_elementwise(op, a: Tensor, other, fwd, da, db) -> Tensor:
    if isinstance(other, Tensor):
        b = other
        _check_broadcast(a.shape, b.shape)
        if a.dtype != b.dtype:
            raise ValueError(f"dtype mismatch in {op}: {a.dtype} vs {b.dtype}")
        out_data = fwd(a.data, b.data)

        def backward(g):
            if a._tracked():
                _accumulate(a, _reduce_to(a.shape, da(g, a.data, b.data)))
            if b._tracked():
                _accumulate(b, _reduce_to(b.shape, db(g, a.data, b.data)))

        return _record(op, (a, b), out_data, backward)

    scalar = float(other)
    out_data = fwd(a.data, scalar)

    def backward(g):
        if a._tracked():
            _accumulate(a, da(g, a.data, scalar))

    return _record(op, (a,), out_data, backward)


def _unary(op, a: Tensor, fwd, backward_local) -> Tensor:
    out_data = fwd(a.data)

    def backward(g):
        if a._tracked():
            _accumulate(a, backward_local(g, a.data, out_data))

    return _record(op, (a,), out_data, backward)


def _reduce(op, a: Tensor, axes, mean: bool) -> Tensor:
    if axes is None:
        ax = tuple(range(a.ndim))
    else:
        ax = (axes,) if isinstance(axes, int) else tuple(axes)
        if len(set(ax)) != len(ax):
            raise ValueError(f"duplicate reduction axes: {ax}")
        for x in ax:
            if not (0 <= x < a.ndim):
                raise ValueError(f"axis {x} invalid for rank {a.ndim}")
    count = int(np.prod([a.shape[x] for x in ax])) if ax else 1
    out_data = a.data.sum(axis=ax) if ax else a.data.copy()
    if mean:
        out_data = out_data / count

    def backward(g):
        if not a._tracked():
            return
        expanded = np.expand_dims(g, ax) if ax else g
        full = np.broadcast_to(expanded, a.shape)
        _accumulate(a, full / count if mean else full)

    return _record(op, (a,), out_data, backward)


def record_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn) -> Tensor:
    """Entry point for composite ops defined outside this module (conv, BN...)."""
    return _record(op, inputs, out_data, backward_fn)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if t._tracked():
        _accumulate(t, g)
