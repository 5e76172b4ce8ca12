"""Defect detection: operator inputs whose abstraction meets an invalid region."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import interval as iv
from .errors import NotDefectProne
from .graph import Graph, NodeValues
from .tensor import operators as opdefs
from .tensor import ops
from .tensor.autodiff import value_of

DEFECT_OPS = tuple(opdefs.DEFECT_SLOT)


@dataclass(frozen=True)
class InvalidRange:
    """Input region on which an operator yields a non-finite result.

    ``regions`` lists, per 1-based slot, the closed interval of bad values;
    for Pow both slots must be bad at the same element.
    """

    kind: str
    dtype: str
    umin: float
    umax: float
    regions: tuple

    @property
    def slot(self) -> int:
        return opdefs.DEFECT_SLOT[self.kind]


def dtype_constants(dtype) -> tuple[float, float]:
    fi = np.finfo(dtype)
    return float(fi.tiny), float(fi.max)


def invalid_range(kind: str, dtype="f32") -> InvalidRange:
    np_dtype = {"f32": np.float32, "f64": np.float64}.get(dtype, dtype)
    name = "f32" if np.dtype(np_dtype) == np.float32 else "f64"
    umin, umax = dtype_constants(np_dtype)
    inf = np.inf
    tiny = (-umin, umin)
    table = {
        "Log": {1: (-inf, umin)},
        "Sqrt": {1: (-inf, umin)},
        "Exp": {1: (float(np.log(umax)), inf)},
        "Reciprocal": {1: tiny},
        "Div": {2: tiny},
        "Range": {3: tiny},
        "Pow": {1: tiny, 2: (-inf, -umin)},
        # the count of counted cells (as a scalar) must stay positive
        "NegativeLogLikelihoodLoss": {2: (-inf, umin)},
    }
    if kind not in table:
        raise NotDefectProne(f"{kind} cannot produce a numerical failure")
    return InvalidRange(kind, name, umin, umax, tuple(sorted(table[kind].items())))


@dataclass(frozen=True)
class DefectReport:
    node: str
    op: str
    slot: int
    abstraction: tuple  # hull (l, u) of the offending input
    witness: tuple  # hull of abstraction ∩ invalid region
    note: str = ""

    def to_json(self) -> dict:
        return {
            "node": self.node,
            "op": self.op,
            "slot": self.slot,
            "abstraction": [float(v) for v in self.abstraction],
            "witness": [float(v) for v in self.witness],
            "note": self.note,
        }


def _overlap_mask(lo, hi, region):
    a, b = region
    return (lo <= b) & (hi >= a)


def _witness(lo, hi, mask, region):
    a, b = region
    return float(np.min(np.maximum(lo[mask], a))), float(np.max(np.minimum(hi[mask], b)))


def _check_node(g: Graph, state, node) -> DefectReport | None:
    ir = invalid_range(node.op, node.dtype)
    if node.op == "NegativeLogLikelihoodLoss":
        if node.attrs.get("reduction", "mean") != "mean":
            return None
        den = state.aux.get(node.id, {}).get("denominator")
        if den is None:
            return None
        dl, du = den.hull()
        if dl > ir.umin:
            return None
        return DefectReport(node.id, node.op, 2, (dl, du), (dl, min(du, ir.umin)),
                            "count of counted cells may be zero")
    regions = dict(ir.regions)
    if node.op == "Pow":
        base, ex = iv.align([state.input(node.id, 1), state.input(node.id, 2)], g.out_shapes[node.id][0])
        mask = _overlap_mask(base.lo, base.hi, regions[1]) & _overlap_mask(ex.lo, ex.hi, regions[2])
        if not mask.any():
            return None
        return DefectReport(node.id, node.op, 1, base.hull(), _witness(base.lo, base.hi, mask, regions[1]),
                            "base near zero with negative exponent")
    slot = ir.slot
    a = state.input(node.id, slot)
    mask = _overlap_mask(a.lo, a.hi, regions[slot])
    if not mask.any():
        return None
    return DefectReport(node.id, node.op, slot, a.hull(), _witness(a.lo, a.hi, mask, regions[slot]))


def detect(g: Graph, state) -> list[DefectReport]:
    """One report per defect-prone node whose input may enter its invalid region,
    in topological order."""
    out = []
    for node in g.operators_of(*DEFECT_OPS):
        rep = _check_node(g, state, node)
        if rep is not None:
            out.append(rep)
    return out


# ---------------------------------------------------------------- concrete membership


def nll_count(node, values: NodeValues):
    """Sum of effective weights of counted cells in an NLL evaluation.

    Differentiable in the class weights when those are Vars.
    """
    xs = values.inputs(node.id)
    x_shape = np.shape(value_of(xs[0]))
    _, cls, keep = opdefs.nll_parts(x_shape, value_of(xs[1]), node.attrs.get("ignore_index"))
    if len(xs) < 3:
        return float(np.sum(keep))
    w = ops.take(xs[2], np.ravel(cls))
    return ops.sum(ops.mul(w, np.ravel(keep).astype(np.float64)))


def in_invalid_range(g: Graph, node, values: NodeValues) -> bool:
    """Whether the concrete inputs of ``node`` lie in its invalid region."""
    ir = invalid_range(node.op, node.dtype)
    regions = dict(ir.regions)
    if node.op == "NegativeLogLikelihoodLoss":
        return node.attrs.get("reduction", "mean") == "mean" and float(value_of(nll_count(node, values))) <= ir.umin
    if node.op == "Pow":
        a = np.asarray(values.input(node.id, 1), dtype=np.float64)
        b = np.asarray(values.input(node.id, 2), dtype=np.float64)
        return bool(np.any((np.abs(a) <= ir.umin) & (b <= -ir.umin)))
    slot = ir.slot
    v = np.asarray(values.input(node.id, slot), dtype=np.float64)
    lo, hi = regions[slot]
    return bool(np.any((v >= lo) & (v <= hi)))


def triggered_nodes(g: Graph, values: NodeValues) -> list[str]:
    return [n.id for n in g.operators_of(*DEFECT_OPS) if in_invalid_range(g, n, values)]
