"""Forward abstract interpretation over a graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .. import interval as iv
from ..errors import (
    AnalysisError,
    LoopBudgetExceeded,
    MissingBinding,
    NotDifferentiableMode,
    ShapeMismatch,
)
from ..graph import Graph
from ..interval import PartitionedInterval as PI
from ..tensor import ops
from ..tensor import operators as opdefs
from ..tensor.autodiff import grad, is_var, leaf, value_of
from .labeling import label_fine_grained
from .transfer import Ctx, tf_clip, transfer

# operators evaluated through library transcendentals, which may be off by an
# ulp in the graph dtype; their snapped bounds get one ulp of extra slack
SLACK_OPS = frozenset({"Exp", "Log", "Sigmoid", "Tanh", "Softplus", "Softmax", "LogSoftmax", "Pow"})

# value ranges every output of the operator is known to respect
OUTPUT_RANGE = {
    "Softmax": (0.0, 1.0),
    "Sigmoid": (0.0, 1.0),
    "Tanh": (-1.0, 1.0),
    "Exp": (0.0, np.inf),
    "Sqrt": (0.0, np.inf),
    "Abs": (0.0, np.inf),
    "Relu": (0.0, np.inf),
    "Softplus": (0.0, np.inf),
    "LogSoftmax": (-np.inf, 0.0),
}

LOOP_BUDGET = 1000


# ---------------------------------------------------------------- configuration


def _as_range(rng_def):
    """(lo, hi) from [lo, hi] scalars or {"l": tensor, "u": tensor}."""
    if isinstance(rng_def, Mapping):
        lo, hi = np.asarray(rng_def["l"], dtype=np.float64), np.asarray(rng_def["u"], dtype=np.float64)
    else:
        lo, hi = (np.asarray(v, dtype=np.float64) for v in rng_def)
    if np.any(lo > hi):
        raise ValueError("valid range with lower bound above upper bound")
    return lo, hi


@dataclass
class ValidRanges:
    """Valid value ranges of Input and Weight nodes."""

    default_input: tuple = (-10.0, 10.0)
    default_weight: tuple = (-10.0, 10.0)
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ranges = {k: _as_range(v) for k, v in self.ranges.items()}
        self.default_input = tuple(float(v) for v in self.default_input)
        self.default_weight = tuple(float(v) for v in self.default_weight)

    def explicit(self, nid: str) -> bool:
        return nid in self.ranges

    def range_of(self, node) -> tuple:
        if node.id in self.ranges:
            lo, hi = self.ranges[node.id]
            return np.broadcast_to(lo, node.shape), np.broadcast_to(hi, node.shape)
        if node.kind == "Input":
            d = self.default_input
        elif node.kind == "Weight":
            d = self.default_weight
        else:
            raise MissingBinding(f"no valid range for {node.kind} node {node.id!r}")
        return np.full(node.shape, d[0]), np.full(node.shape, d[1])

    def hull(self, node) -> tuple[float, float]:
        lo, hi = self.range_of(node)
        return float(np.min(lo)), float(np.max(hi))

    @classmethod
    def from_config(cls, cfg: Mapping | None) -> "ValidRanges":
        cfg = dict(cfg or {})
        return cls(
            default_input=tuple(cfg.get("default_input", (-10.0, 10.0))),
            default_weight=tuple(cfg.get("default_weight", (-10.0, 10.0))),
            ranges=dict(cfg.get("valid_ranges", {})),
        )

    def sample(self, g: Graph, rng: np.random.Generator) -> tuple[dict, dict]:
        """One uniform draw of (x, w) for every Input and init-less Weight."""
        x, w = {}, {}
        for n in g.nodes_of("Input", "Weight"):
            if n.kind == "Weight" and n.init is not None and not self.explicit(n.id):
                continue
            lo, hi = self.range_of(n)
            (x if n.kind == "Input" else w)[n.id] = np.asarray(rng.uniform(lo, hi), dtype=n.np_dtype)
        return x, w


@dataclass
class GranularityPolicy:
    default: str = "coarsest"
    overrides: dict = field(default_factory=dict)

    def for_node(self, nid: str, labeled: bool) -> str:
        if labeled:
            return "finest"
        return self.overrides.get(nid, self.default)


# ---------------------------------------------------------------- state


@dataclass
class AbstractState:
    graph: Graph
    mode: str
    differentiable: bool
    outputs: dict = field(default_factory=dict)
    input_overrides: dict = field(default_factory=dict)
    endpoints: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)
    labeled: frozenset = frozenset()

    def output(self, nid: str, slot: int = 1) -> PI:
        return self.outputs[nid][slot - 1]

    def input(self, nid: str, slot: int) -> PI:
        if (nid, slot) in self.input_overrides:
            return self.input_overrides[(nid, slot)]
        e = self.graph.in_edges(nid)[slot - 1]
        return self.outputs[e.src][e.src_slot - 1]

    def inputs(self, nid: str) -> list[PI]:
        return [self.input(nid, k + 1) for k in range(len(self.graph.in_edges(nid)))]

    def __getitem__(self, nid) -> PI:
        return self.output(nid)


# ---------------------------------------------------------------- rounding


def _snap(x, dtype, down: bool, extra: bool, umax: float):
    v = np.asarray(value_of(x), dtype=np.float64)
    direction = -np.inf if down else np.inf
    with np.errstate(all="ignore"):
        if dtype == np.float32:
            f = v.astype(np.float32)
            back = f.astype(np.float64)
            off = back > v if down else back < v
            f = np.where(off, np.nextafter(f, np.float32(direction)), f)
            if extra:
                f = np.nextafter(f, np.float32(direction))
            r = f.astype(np.float64)
        else:
            r = np.nextafter(v, direction) if extra else v.copy()
    r = np.where(np.isnan(r), -umax if down else umax, r)
    return np.clip(r, -umax, umax)


def finalize(a: PI, node, round_to_dtype: bool = True, op: str | None = None) -> PI:
    """Clamp to the dtype range, fix NaN bounds and snap outward to the dtype grid."""
    dtype = node.np_dtype
    umax = float(np.finfo(dtype).max)
    extra = op in SLACK_OPS
    if round_to_dtype:
        lo = _snap(a.l, dtype, True, extra, umax)
        hi = _snap(a.u, dtype, False, extra, umax)
    else:
        lo = np.clip(np.nan_to_num(np.asarray(value_of(a.l), dtype=np.float64), nan=-umax), -umax, umax)
        hi = np.clip(np.nan_to_num(np.asarray(value_of(a.u), dtype=np.float64), nan=umax), -umax, umax)
    if op in OUTPUT_RANGE:
        rlo, rhi = OUTPUT_RANGE[op]
        lo = np.clip(lo, rlo, rhi)
        hi = np.clip(hi, rlo, rhi)
    l = ops.replace_value(a.l, lo) if is_var(a.l) else lo
    u = ops.replace_value(a.u, hi) if is_var(a.u) else hi
    return PI(l, u, a.splits, a.shape)


# ---------------------------------------------------------------- analysis


def _initial_abstraction(node, vr: ValidRanges, splits_kind: str):
    shape = tuple(node.shape)
    splits = iv.finest(shape) if splits_kind == "finest" else iv.coarsest(shape)
    if node.kind == "Constant" or (node.kind == "Weight" and node.init is not None and not vr.explicit(node.id)):
        # known exactly: keep every value, merging only equal neighbours
        val = np.asarray(node.init, dtype=node.np_dtype).astype(np.float64)
        return iv.compress(iv.point(val)), False
    lo, hi = vr.range_of(node)
    return iv.from_elementwise(lo, hi, splits), True


def _imposed(node, a: PI, bounds) -> PI:
    lo, hi = bounds
    return iv.uniform(node.shape, lo, hi, a.splits)


def _imposed_slot(node) -> int:
    return opdefs.DEFECT_SLOT[node.op] if node.op in ("Div", "Range") else 1


def analyze(
    g: Graph,
    vr: ValidRanges | None = None,
    pol: GranularityPolicy | None = None,
    mode: str = "tight",
    differentiable: bool = False,
    *,
    impose: Mapping | None = None,
    round_to_dtype: bool = True,
    budget: int = LOOP_BUDGET,
    initial: Mapping[str, PI] | None = None,
) -> AbstractState:
    """Abstractions of every node output for all inputs in the valid ranges.

    ``impose`` maps node ids to ``(l, u)`` scalars (floats or Vars).  For an
    Input or Weight node the pair replaces its range; for an operator the
    pair clips the value reaching its risky input slot.  ``initial`` gives
    ready-made abstractions for initial nodes (used for loop bodies).
    """
    if mode not in ("tight", "fast"):
        raise ValueError(f"unknown mode {mode!r}")
    vr = vr or ValidRanges()
    pol = pol or GranularityPolicy()
    impose = dict(impose or {})
    initial = dict(initial or {})
    labeled = frozenset(label_fine_grained(g))
    st = AbstractState(g, mode, differentiable, labeled=labeled)

    for nid in g.order:
        node = g.node(nid)
        if node.is_initial:
            if nid in initial:
                st.outputs[nid] = [initial[nid]]
                continue
            a, ranged = _initial_abstraction(node, vr, pol.for_node(nid, nid in labeled))
            a = finalize(a, node, round_to_dtype)
            if nid in impose:
                a = _imposed(node, a, impose[nid])
                for side, t in zip("lu", impose[nid]):
                    if is_var(t):
                        st.endpoints[(nid, side)] = t
            elif differentiable and ranged and node.kind in ("Input", "Weight"):
                lv, uv = leaf(a.lo.copy()), leaf(a.hi.copy())
                st.endpoints[(nid, "l")], st.endpoints[(nid, "u")] = lv, uv
                a = PI(lv, uv, a.splits, a.shape)
            st.outputs[nid] = [a]
            continue

        if nid in impose:
            slot = _imposed_slot(node)
            src = st.input(nid, slot)
            lo, hi = impose[nid]
            bound = [src, iv.uniform((), lo, hi), iv.uniform((), lo, hi)]
            clip_ctx = Ctx(node, src.shape, dtype=node.np_dtype)
            st.input_overrides[(nid, slot)] = tf_clip(clip_ctx, bound)[0]
            for side, t in zip("lu", impose[nid]):
                if is_var(t):
                    st.endpoints[(nid, side)] = t

        ins = st.inputs(nid)
        ctx = Ctx(node, tuple(g.out_shapes[nid][0]), dtype=node.np_dtype, mode=mode,
                  differentiable=differentiable)
        # point operands run the real kernel, so the result needs no rounding slack
        exact = node.op != "Loop" and all(a.is_point() and not a.differentiable for a in ins)
        if node.op == "Loop":
            outs = transfer_loop(node, ins, budget=budget, mode=mode, round_to_dtype=round_to_dtype)
        elif exact:
            outs = _point_eval(g, node, ins)
        else:
            outs = transfer(ctx, ins)
        if ctx.aux:
            st.aux[nid] = dict(ctx.aux)
        final = []
        for k, (a, shape) in enumerate(zip(outs, g.out_shapes[nid])):
            if tuple(a.shape) != tuple(shape):
                raise ShapeMismatch(f"abstraction of {nid!r} has shape {a.shape}, expected {tuple(shape)}")
            final.append(finalize(a, node, round_to_dtype, None if exact else node.op))
        st.outputs[nid] = final
    return st


def _point_eval(g: Graph, node, ins: list[PI]) -> list[PI]:
    """Operands known exactly: run the operator in the graph's dtypes."""
    vals = []
    for e, a in zip(g.in_edges(node.id), ins):
        lo, _ = a.expand()
        vals.append(np.asarray(lo).astype(g.node(e.src).np_dtype))
    with np.errstate(all="ignore"):
        res = opdefs.eval_node(node.op, vals, node.attrs, declared_shape=node.shape)
    out = []
    for r in res:
        r = np.asarray(r, dtype=node.np_dtype).astype(np.float64)
        out.append(iv.compress(iv.point(r)))
    return out


# ---------------------------------------------------------------- loops


def transfer_loop(node, state_or_inputs, budget: int = LOOP_BUDGET, mode: str = "tight",
                  round_to_dtype: bool = True) -> list[PI]:
    """Abstract iteration of a Loop body until the exit is decided.

    ``state_or_inputs`` is either the enclosing AbstractState or the list of
    operand abstractions.  Returns one abstraction per carried value.
    """
    if isinstance(state_or_inputs, AbstractState):
        ins = state_or_inputs.inputs(node.id)
    else:
        ins = list(state_or_inputs)
    ins = [a.detach() for a in ins]
    body: Graph = node.attrs["body"]
    trip_lo, trip_hi = ins[0].hull()
    cond = ins[1]
    carried = ins[2:]
    it_node = body.node(body.inputs[0])
    exit_state = None
    k = 0
    while True:
        c_lo, c_hi = cond.hull()
        if np.isnan(c_lo) or np.isnan(c_hi):
            raise AnalysisError(f"loop condition of {node.id!r} is undetermined")
        can_exit = k >= trip_lo or (c_lo <= 0.0 <= c_hi)
        must_exit = k >= trip_hi or (c_lo == 0.0 and c_hi == 0.0)
        if can_exit:
            exit_state = list(carried) if exit_state is None else [iv.join(a, b) for a, b in zip(exit_state, carried)]
        if must_exit:
            break
        if k >= budget:
            raise LoopBudgetExceeded(f"loop {node.id!r} undecided after {budget} abstract iterations")
        init = {
            it_node.id: iv.point(np.full(it_node.shape, float(k))),
            body.inputs[1]: iv.broadcast_to(cond, body.node(body.inputs[1]).shape)
            if cond.shape != tuple(body.node(body.inputs[1]).shape) else cond,
        }
        for bid, a in zip(body.inputs[2:], carried):
            init[bid] = a
        sub = analyze(body, ValidRanges(), GranularityPolicy(), mode, False,
                      round_to_dtype=round_to_dtype, budget=budget, initial=init)
        res = [sub.output(bid, slot) for bid, slot in body.outputs]
        cond, carried = res[0], res[1:]
        k += 1
    return [iv.compress(a) for a in exit_state]


# ---------------------------------------------------------------- gradients


def endpoint_gradients(state: AbstractState, objective) -> dict:
    """Gradient of a scalar built from the state's bounds w.r.t. every endpoint."""
    if not state.differentiable:
        raise NotDifferentiableMode("analysis did not run in differentiable mode")
    keys = list(state.endpoints)
    if not is_var(objective):
        return {k: np.zeros(np.shape(value_of(state.endpoints[k]))) for k in keys}
    gs = grad(objective, [state.endpoints[k] for k in keys])
    return dict(zip(keys, gs))
