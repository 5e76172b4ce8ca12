"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Var` wraps a float64 array together with the primitive that
produced it.  Every primitive's backward rule is itself written with the
differentiable functions in :mod:`numguard.tensor.ops`, so running
:func:`grad` with ``create_graph=True`` records the backward pass and the
resulting gradients can be differentiated again (double-backward).

Plain numpy arrays flow through the same functions untouched, which is how
concrete graph execution and differentiable execution share one code path.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import NonDifferentiableNode

# Backward rule signature: vjp(g, out, *args) -> tuple of per-arg gradients.
VJP = Callable[..., tuple]

_ACTIVE_TAPES: list["Tape"] = []


class Var:
    """A differentiable float64 array."""

    __slots__ = ("value", "args", "vjp", "fwd", "kind", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, args=(), vjp=None, fwd=None, kind=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.args = args
        self.vjp = vjp
        self.fwd = fwd
        self.kind = kind

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def is_leaf(self):
        return self.vjp is None

    def __repr__(self):
        tag = f", kind={self.kind}" if self.kind else ""
        return f"Var({self.value!r}{tag})"

    def __len__(self):
        return len(self.value)

    # operator overloads delegate to the functional API
    def __add__(self, o):
        return _ops().add(self, o)

    def __radd__(self, o):
        return _ops().add(o, self)

    def __sub__(self, o):
        return _ops().sub(self, o)

    def __rsub__(self, o):
        return _ops().sub(o, self)

    def __mul__(self, o):
        return _ops().mul(self, o)

    def __rmul__(self, o):
        return _ops().mul(o, self)

    def __truediv__(self, o):
        return _ops().div(self, o)

    def __rtruediv__(self, o):
        return _ops().div(o, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, o):
        return _ops().power(self, o)

    def __matmul__(self, o):
        return _ops().matmul(self, o)

    def __rmatmul__(self, o):
        return _ops().matmul(o, self)

    def __getitem__(self, key):
        return _ops().getitem(self, key)

    @property
    def T(self):
        return _ops().transpose(self)


def _ops():
    from . import ops

    return ops


def value_of(x) -> np.ndarray:
    """Underlying array of a Var, or the argument itself as an array."""
    return x.value if isinstance(x, Var) else np.asarray(x)


def is_var(x) -> bool:
    return isinstance(x, Var)


def any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def leaf(value) -> Var:
    """Create a differentiable leaf from a concrete value."""
    v = Var(value)
    for tape in _ACTIVE_TAPES:
        tape.records.append(v)
    return v


def make(value, args: Sequence, vjp: VJP, fwd: Callable, kind: str | None = None) -> Var:
    """Record one primitive application.  Used by :mod:`numguard.tensor.ops`."""
    out = Var(value, tuple(args), vjp, fwd, kind)
    for tape in _ACTIVE_TAPES:
        tape.records.append(out)
    return out


class Tape:
    """Records every Var created while active, in creation order.

    The dynamic graph held by the Vars is what :func:`grad` walks; the tape
    exists so a recorded computation can be replayed and audited.
    """

    def __init__(self):
        self.records: list[Var] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def replay(self, leaves: Mapping[Var, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every recorded primitive in order and return the new values.

        ``leaves`` optionally substitutes values for recorded leaves.
        """
        leaves = dict(leaves or {})
        values: dict[int, np.ndarray] = {}
        out = []
        for rec in self.records:
            if rec.fwd is None:
                val = np.asarray(leaves.get(rec, rec.value), dtype=np.float64)
            else:
                argv = [values.get(id(a), a.value) if isinstance(a, Var) else a for a in rec.args]
                val = np.asarray(rec.fwd(*argv), dtype=np.float64)
            values[id(rec)] = val
            out.append(val)
        return out


def _topo(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for a in node.args:
            if isinstance(a, Var) and id(a) not in seen:
                stack.append((a, False))
    return order


def grad(
    output: Var,
    wrt: Sequence[Var],
    seed=None,
    create_graph: bool = False,
    overrides: Mapping[str, VJP] | None = None,
) -> list:
    """Gradients of ``output`` with respect to each Var in ``wrt``.

    ``seed`` defaults to ones (so a non-scalar output is implicitly summed).
    ``overrides`` maps a primitive ``kind`` (operator name such as ``"Relu"``)
    to a replacement backward rule; forward values are never touched.
    Inputs that ``output`` does not depend on get zero gradients.
    """
    if not isinstance(output, Var):
        return [np.zeros_like(value_of(w)) for w in wrt]
    overrides = overrides or {}
    keep = {id(w) for w in wrt}
    if seed is None:
        seed = np.ones_like(output.value)
    grads: dict[int, object] = {id(output): seed}
    ops = _ops()

    for node in reversed(_topo(output)):
        g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
        if g is None or not node.args:
            continue
        rule = overrides.get(node.kind, node.vjp) if node.kind else node.vjp
        if rule is None:
            raise NonDifferentiableNode(node.kind or "primitive")
        if create_graph:
            args, out = node.args, node
        else:
            g = value_of(g)
            args = tuple(a.value if isinstance(a, Var) else a for a in node.args)
            out = node.value
        parts = rule(g, out, *args)
        for a, ga in zip(node.args, parts):
            if ga is None or not isinstance(a, Var):
                continue
            prev = grads.get(id(a))
            grads[id(a)] = ga if prev is None else ops.add(prev, ga)

    result = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = np.zeros_like(value_of(w))
        result.append(g if create_graph else value_of(g).copy())
    return result
