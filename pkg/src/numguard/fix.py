"""Precondition fixes: interval clips that provably keep defects out of reach.

``abstraction_optimization`` searches clip intervals with a sign-gradient
rule on the interval centres and a shared, geometrically shrinking span;
``apply_fix`` splices the resulting Clip nodes into the graph.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import interval as iv
from .analysis.analyze import GranularityPolicy, ValidRanges, analyze
from .detect import DEFECT_OPS, detect, invalid_range
from .graph import Edge, Graph, Node, execute
from .tensor import ops
from .tensor.autodiff import grad, is_var, leaf, value_of
from .testgen import Failed


@dataclass
class FixRequest:
    defects: list
    v_fix: list

    def __post_init__(self):
        if not self.v_fix:
            raise ValueError("V_fix must not be empty")


@dataclass
class Fix:
    bounds: dict  # node id -> (l, u)
    span: float
    iterations: int
    verified: bool = False
    defects: list = field(default_factory=list)
    elapsed: float = 0.0

    def to_json(self) -> dict:
        return {
            "nodes": [{"id": k, "l": float(l), "u": float(u)} for k, (l, u) in sorted(self.bounds.items())],
            "span": float(self.span),
            "iterations": int(self.iterations),
            "verified": bool(self.verified),
        }


# ---------------------------------------------------------------- loss


def _penetration(g: Graph, state, nid: str):
    """Signed depth of the node's input abstraction into its invalid region.

    Negative means every block is clear of the region.
    """
    node = g.node(nid)
    ir = invalid_range(node.op, node.dtype)
    umin = ir.umin
    if node.op == "NegativeLogLikelihoodLoss":
        den = state.aux.get(nid, {}).get("denominator")
        if den is None or node.attrs.get("reduction", "mean") != "mean":
            return -1.0
        return ops.sub(umin, ops.amin(den.l))
    if node.op in ("Log", "Sqrt"):
        return ops.sub(umin, ops.amin(state.input(nid, 1).l))
    if node.op == "Exp":
        return ops.sub(ops.amax(state.input(nid, 1).u), float(np.log(ir.umax)))

    # ties go to the lower bound: an even split cancels on intervals symmetric about 0
    def divisor(a):
        return ops.minimum(ops.sub(umin, a.l), ops.add(a.u, umin), tie="first")

    if node.op == "Pow":
        base, ex = iv.align([state.input(nid, 1), state.input(nid, 2)], g.out_shapes[nid][0])
        per = ops.minimum(divisor(base), ops.sub(-umin, ex.l), tie="split")
        return ops.amax(per)
    return ops.amax(divisor(state.input(nid, ir.slot)))


def precond_loss(g: Graph, req: FixRequest, bounds: dict, vr: ValidRanges | None = None,
                 mode: str = "tight", differentiable: bool = True, pol: GranularityPolicy | None = None):
    """Max over targeted defects of their penetration under the imposed bounds.

    Returns ``(loss, state)``; ``loss`` is a Var when any bound is one.
    """
    state = analyze(g, vr, pol, mode, differentiable, impose=bounds)
    terms = [_penetration(g, state, d) for d in req.defects]
    loss = terms[0]
    for t in terms[1:]:
        loss = ops.maximum(loss, t, tie="split")
    return loss, state


# ---------------------------------------------------------------- search


def valid_hull(g: Graph, vr: ValidRanges, nid: str, base_state=None) -> tuple[float, float]:
    """Scalar valid range of a fix location (tensor ranges reduce to their hull)."""
    node = g.node(nid)
    if node.kind in ("Input", "Weight"):
        return vr.hull(node)
    if base_state is None:
        base_state = analyze(g, vr)
    return base_state.input(nid, _clip_slot(node)).hull()


def _snap_inward(node_dtype, lo: float, hi: float) -> tuple[float, float]:
    """Round a clip interval inward onto the grid of the clipped dtype."""
    if node_dtype == np.float32:
        f_lo = np.float32(lo)
        if float(f_lo) < lo:
            f_lo = np.nextafter(f_lo, np.float32(np.inf))
        f_hi = np.float32(hi)
        if float(f_hi) > hi:
            f_hi = np.nextafter(f_hi, np.float32(-np.inf))
        lo, hi = float(f_lo), float(f_hi)
    return lo, max(hi, lo)


def _clip_dtype(g: Graph, nid: str):
    node = g.node(nid)
    if node.is_initial:
        return node.np_dtype
    e = g.in_edges(nid)[_clip_slot(node) - 1]
    return g.node(e.src).np_dtype


def _clip_slot(node) -> int:
    return 3 if node.op == "Range" else 2 if node.op == "Div" else 1


def _imposed_bound(c, half: float, s: float, lim: tuple, dtype):
    """Clipped, dtype-snapped (l, u) whose gradients pass through the raw expression."""
    raw_l = ops.sub(c, s * half)
    raw_u = ops.add(c, s * half)
    lv = float(np.clip(value_of(raw_l), *lim))
    uv = float(np.clip(value_of(raw_u), *lim))
    lv, uv = _snap_inward(dtype, lv, uv)
    return ops.replace_value(raw_l, np.asarray(lv)), ops.replace_value(raw_u, np.asarray(uv))


def abstraction_optimization(
    g: Graph,
    req: FixRequest,
    vr: ValidRanges | None = None,
    mode: str = "tight",
    maxiter: int = 1000,
    budget_seconds: float = 1800.0,
    pol: GranularityPolicy | None = None,
    update: str = "sign",
) -> Fix | Failed:
    """Sign-gradient search over clip centres with a shared shrinking span.

    ``update="gd"`` replaces the sign step by a plain gradient step (for
    comparison runs).
    """
    t0 = time.perf_counter()
    vr = vr or ValidRanges()
    s, gamma_s, gamma_c, minstep = 1.0, 0.9, 0.1, 0.1
    base = analyze(g, vr, pol, mode)
    lims = {n: valid_hull(g, vr, n, base) for n in req.v_fix}
    half = {n: (hi - lo) / 2.0 for n, (lo, hi) in lims.items()}
    centres = {n: (lo + hi) / 2.0 for n, (lo, hi) in lims.items()}
    dtypes = {n: _clip_dtype(g, n) for n in req.v_fix}
    cur = {n: _snap_inward(dtypes[n], *lims[n]) for n in req.v_fix}

    def evaluate(var_node=None):
        bounds = {}
        cvar = None
        for n in req.v_fix:
            if n == var_node:
                cvar = leaf(np.asarray(centres[n], dtype=np.float64))
                bounds[n] = _imposed_bound(cvar, half[n], s, lims[n], dtypes[n])
            else:
                bounds[n] = cur[n]
        loss, state = precond_loss(g, req, bounds, vr, mode, var_node is not None, pol)
        return loss, state, cvar

    for it in range(1, maxiter + 1):
        for n in req.v_fix:
            loss, state, cvar = evaluate(n)
            gval = float(np.sum(grad(loss, [cvar])[0])) if is_var(loss) else 0.0
            if not np.isfinite(gval):
                gval = 0.0
            if update == "gd":
                centres[n] = centres[n] - gamma_c * gval
            else:
                centres[n] = centres[n] - gamma_c * max(abs(centres[n]), minstep) * float(np.sign(gval))
            lo, hi = lims[n]
            nl = float(np.clip(centres[n] - s * half[n], lo, hi))
            nu = float(np.clip(centres[n] + s * half[n], lo, hi))
            cur[n] = _snap_inward(dtypes[n], nl, nu)
        loss, _, _ = evaluate(None)
        if float(value_of(loss)) < 0:
            return Fix(dict(cur), s, it, defects=list(req.defects), elapsed=time.perf_counter() - t0)
        s *= gamma_s
        if time.perf_counter() - t0 > budget_seconds:
            break
    return Failed("failed to find precondition fix", float(value_of(loss)), time.perf_counter() - t0)


# ---------------------------------------------------------------- graph rewriting


def _fresh(g: Graph, base: str, taken: set) -> str:
    name, k = base, 1
    while name in g or name in taken:
        k += 1
        name = f"{base}_{k}"
    taken.add(name)
    return name


def apply_fix(g: Graph, fix: Fix) -> Graph:
    """Copy of ``g`` with a Clip(l, u) spliced in at every fixed location."""
    nodes = list(g.nodes)
    edges = list(g.edges)
    taken: set = set()
    for nid, (lo, hi) in sorted(fix.bounds.items()):
        node = g.node(nid)
        dtype = _clip_dtype(g, nid)
        dname = "f32" if dtype == np.float32 else "f64"
        cid = _fresh(g, f"{nid}_clip", taken)
        lid = _fresh(g, f"{nid}_clip_lo", taken)
        hid = _fresh(g, f"{nid}_clip_hi", taken)
        nodes.append(Node(lid, "Constant", shape=(), dtype=dname, init=np.asarray(lo, dtype=dtype)))
        nodes.append(Node(hid, "Constant", shape=(), dtype=dname, init=np.asarray(hi, dtype=dtype)))
        if node.is_initial:
            shape = tuple(node.shape)
            moved = [e for e in edges if e.src == nid]
            edges = [e for e in edges if e.src != nid]
            edges += [Edge(cid, 1, e.dst, e.dst_slot) for e in moved]
            edges.append(Edge(nid, 1, cid, 1))
        else:
            slot = _clip_slot(node)
            old = next(e for e in edges if e.dst == nid and e.dst_slot == slot)
            shape = tuple(g.out_shapes[old.src][old.src_slot - 1])
            edges.remove(old)
            edges.append(Edge(old.src, old.src_slot, cid, 1))
            edges.append(Edge(cid, 1, nid, slot))
        nodes.append(Node(cid, "Operator", op="Clip", shape=shape, dtype=dname))
        edges.append(Edge(lid, 1, cid, 2))
        edges.append(Edge(hid, 1, cid, 3))
    return Graph(g.name, nodes, edges, g.loss_node, g.inputs, g.outputs)


def verify_fix(g_fixed: Graph, vr: ValidRanges | None = None, samples: int = 1000, seed: int = 0,
               targets=None, mode: str = "tight") -> bool:
    """Static re-analysis is clean on the targets and random runs stay finite."""
    vr = vr or ValidRanges()
    reports = detect(g_fixed, analyze(g_fixed, vr, mode=mode))
    flagged = {r.node for r in reports}
    if targets is None:
        if flagged:
            return False
    elif flagged & set(targets):
        return False
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        x, w = vr.sample(g_fixed, rng)
        _, report = execute(g_fixed, x, w)
        if report:
            return False
    return True


def resolve_fix_locations(g: Graph, preset: str, defects: list) -> list:
    """V_fix for a preset: weights, inputs, both, defect or list:<id,id,...>."""
    if preset == "weights":
        return [n.id for n in g.nodes_of("Weight")]
    if preset == "inputs":
        return [n.id for n in g.nodes_of("Input")]
    if preset in ("both", "weights+inputs"):
        return [n.id for n in g.nodes_of("Input", "Weight")]
    if preset == "defect":
        return list(defects)
    if preset.startswith("list:"):
        ids = [s for s in preset[5:].split(",") if s]
        for i in ids:
            g.node(i)
        return ids
    raise ValueError(f"unknown fix location preset {preset!r}")


def fixable_defects(g: Graph, reports) -> list:
    return [r.node for r in reports if g.node(r.node).op in DEFECT_OPS]
