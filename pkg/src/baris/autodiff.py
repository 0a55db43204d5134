"""Reverse-mode differentiation over numpy arrays.

Every primitive in :mod:`baris.ops` returns a :class:`Var`. When any input
requires a gradient, the primitive records a :class:`Node` holding its
parents and a closure mapping the output gradient to input gradients.
Nodes carry a monotonically increasing sequence number, so sorting the
ancestors of a loss by that number recovers recording order, which is a
valid topological order of the graph.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_seq = itertools.count()
_seq_lock = threading.Lock()
_state = threading.local()


class GraphError(RuntimeError):
    """Raised for misuse of the differentiation graph."""


def _next_seq() -> int:
    with _seq_lock:
        return next(_seq)


class Node:
    __slots__ = ("seq", "parents", "backward_fn", "consumed")

    def __init__(self, parents: Sequence["Var"], backward_fn: Callable):
        self.seq = _next_seq()
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.consumed = False


class Var:
    """An array registered for differentiation.

    ``value`` is treated as immutable once the Var is constructed. Leaves are
    created directly; interior Vars are produced by ops and own a ``node``.
    """

    __slots__ = ("value", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.value = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element Var, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Var":
        return Var(self.value, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # operator sugar; the ops module enforces the shape rules
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


def as_var(x, dtype=None) -> Var:
    if isinstance(x, Var):
        return x
    return Var(x, requires_grad=False, dtype=dtype)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Skip graph recording on this thread (inference only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def make_output(value: np.ndarray, parents: Sequence[Var], backward_fn: Callable) -> Var:
    """Wrap ``value`` and record a node if any parent needs a gradient.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Var(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(parents, backward_fn)
    return out


def _ancestors(root: Var) -> list[Var]:
    seen: set[int] = set()
    found: list[Var] = []
    stack = [root]
    while stack:
        v = stack.pop()
        if id(v) in seen:
            continue
        seen.add(id(v))
        found.append(v)
        if v.node is not None:
            stack.extend(p for p in v.node.parents if p.requires_grad)
    return found


def backward(loss: Var) -> None:
    """Populate ``.grad`` on every differentiable ancestor of a scalar loss.

    Gradients accumulate into existing ``.grad`` arrays. The recorded graph
    is released afterwards; a second call on the same graph raises.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss.node is None:
        raise GraphError("loss is detached: no recorded operation leads to a trainable Var")
    if loss.node.consumed:
        raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")

    vars_ = _ancestors(loss)
    interior = sorted((v for v in vars_ if v.node is not None), key=lambda v: v.node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for v in interior:
        g = grads.pop(id(v), None)
        node = v.node
        if g is not None:
            _accumulate(v, g)
            in_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, in_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise GraphError(f"gradient shape {pg.shape} does not match operand shape {p.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        node.consumed = True
        node.backward_fn = _consumed
        node.parents = ()

    # leaves that received gradient
    for v in vars_:
        if v.node is None:
            g = grads.pop(id(v), None)
            if g is not None and v.requires_grad:
                _accumulate(v, g)


def _accumulate(v: Var, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=v.value.dtype)
    v.grad = g.copy() if v.grad is None else v.grad + g


def _consumed(g):
    raise GraphError("graph already consumed")
