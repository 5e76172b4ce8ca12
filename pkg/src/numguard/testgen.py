"""Failure-exhibiting test generation.

A *unit test* is a weight/input binding under which inference drives a
defect node into its invalid range.  A *system test* is a training example
whose single SGD step, from given initial weights, produces weights under
which the unit test's inference input fails.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .analysis.analyze import ValidRanges
from .detect import DefectReport, in_invalid_range, nll_count
from .errors import NonFiniteGradient
from .graph import Graph, NodeValues, execute, execute_vars
from .tensor import ops
from .tensor.autodiff import grad, is_var, leaf, value_of
from .tensor.operators import DEFECT_SLOT

STRAIGHT_THROUGH = {"Relu": ops.relu_straight_through}


@dataclass
class Failed:
    reason: str
    best_objective: float = float("inf")
    elapsed: float = 0.0

    def __bool__(self) -> bool:
        return False


@dataclass
class UnitTest:
    defect_node: str
    x_infer: dict
    w_infer: dict
    objective: float
    elapsed: float = 0.0
    verified: bool = True

    def to_json(self) -> dict:
        return {
            "defect_node": self.defect_node,
            "x_infer": _binding_json(self.x_infer),
            "w_infer": _binding_json(self.w_infer),
            "verified": self.verified,
        }


@dataclass
class SystemTest:
    defect_node: str
    x_train: dict
    x_infer: dict
    w_0: dict
    gamma: float
    verified: bool = False
    iterations: int = 0
    elapsed: float = 0.0
    match_loss: float = float("nan")

    def to_json(self) -> dict:
        return {
            "defect_node": self.defect_node,
            "x_train": _binding_json(self.x_train),
            "x_infer": _binding_json(self.x_infer),
            "w_0": _binding_json(self.w_0),
            "gamma": float(self.gamma),
            "verified": self.verified,
        }


def _binding_json(b: dict) -> dict:
    return {k: np.asarray(v, dtype=np.float64).tolist() for k, v in sorted(b.items())}


def binding_from_json(g: Graph, d: dict) -> dict:
    return {k: np.asarray(v, dtype=g.node(k).np_dtype).reshape(g.node(k).shape) for k, v in d.items()}


# ---------------------------------------------------------------- objective


def _node_of(g: Graph, defect):
    nid = defect.node if isinstance(defect, DefectReport) else str(defect)
    return g.node(nid)


def _constants(node):
    fi = np.finfo(node.np_dtype)
    return float(fi.tiny), float(np.log(float(fi.max)))


def objective_from_values(g: Graph, node, values: NodeValues):
    """Signed distance of the node's input to its invalid region (≤ 0 inside).

    Works on concrete arrays and on Vars alike.
    """
    umin, ln_umax = _constants(node)
    op = node.op
    if op == "NegativeLogLikelihoodLoss":
        return ops.sub(nll_count(node, values), umin)
    v = values.input(node.id, DEFECT_SLOT[op])
    if op in ("Log", "Sqrt"):
        return ops.sub(ops.amin(v), umin)
    if op == "Exp":
        return ops.sub(ln_umax, ops.amax(v))
    if op in ("Div", "Reciprocal", "Range"):
        return ops.sub(ops.amin(ops.abs(v)), umin)
    if op == "Pow":
        a = values.input(node.id, 1)
        b = values.input(node.id, 2)
        shape = np.broadcast_shapes(np.shape(value_of(a)), np.shape(value_of(b)))
        ta = ops.sub(ops.abs(ops.broadcast_to(a, shape)), umin)
        tb = ops.add(ops.broadcast_to(b, shape), umin)
        return ops.amin(ops.maximum(ta, tb))
    raise ValueError(f"{op} is not defect-prone")


def defect_objective(g: Graph, defect, x: dict, w: dict | None = None) -> float:
    """Objective evaluated by concrete execution in the graph's dtypes."""
    values, _ = execute(g, x, w)
    with np.errstate(all="ignore"):
        return float(value_of(objective_from_values(g, _node_of(g, defect), values)))


def triggers(g: Graph, defect, x: dict, w: dict | None = None) -> tuple[bool, bool, float]:
    """(input inside invalid region, node output non-finite, objective)."""
    node = _node_of(g, defect)
    values, report = execute(g, x, w)
    with np.errstate(all="ignore"):
        obj = float(value_of(objective_from_values(g, node, values)))
    return in_invalid_range(g, node, values), node.id in report, obj


# ---------------------------------------------------------------- unit tests


def _free_nodes(g: Graph, vr: ValidRanges) -> list:
    return [
        n
        for n in g.nodes_of("Input", "Weight")
        if not (n.kind == "Weight" and n.init is not None and not vr.explicit(n.id))
    ]


def _split(g: Graph, flat: dict) -> tuple[dict, dict]:
    x = {k: v for k, v in flat.items() if g.node(k).kind == "Input"}
    w = {k: v for k, v in flat.items() if g.node(k).kind == "Weight"}
    return x, w


def _objective_grad(g: Graph, node, flat: dict) -> tuple[float, dict]:
    leaves = {k: leaf(np.asarray(v, dtype=np.float64)) for k, v in flat.items()}
    x, w = _split(g, leaves)
    with np.errstate(all="ignore"):
        values = execute_vars(g, x, w)
        obj = objective_from_values(g, node, values)
        if not is_var(obj):
            return float(obj), {k: np.zeros(np.shape(v)) for k, v in flat.items()}
        gs = grad(obj, list(leaves.values()))
    out = {}
    for k, gk in zip(leaves, gs):
        out[k] = np.where(np.isfinite(gk), gk, 0.0)
    return float(obj.value), out


def gen_unit_test(g: Graph, defect, vr: ValidRanges | None = None, seed: int = 0,
                  restarts: int = 100, grad_iters: int = 100) -> UnitTest | Failed:
    """Random search followed by projected Adam on the defect objective."""
    t0 = time.perf_counter()
    vr = vr or ValidRanges()
    node = _node_of(g, defect)
    rng = np.random.default_rng(seed)
    free = _free_nodes(g, vr)
    bounds = {n.id: vr.range_of(n) for n in free}

    def accept(flat):
        x, w = _split(g, flat)
        inside, flagged, obj = triggers(g, node.id, x, w)
        return inside and flagged and obj <= 0, obj

    best, best_obj = None, np.inf
    for _ in range(restarts):
        x, w = vr.sample(g, rng)
        flat = {**x, **w}
        ok, obj = accept(flat)
        if ok:
            return UnitTest(node.id, x, w, obj, time.perf_counter() - t0)
        if best is None or (np.isfinite(obj) and obj < best_obj):
            best, best_obj = flat, obj
    if best is None:
        return Failed("no samples drawn", best_obj, time.perf_counter() - t0)

    # projected Adam, step size 1
    lr, b1, b2, eps = 1.0, 0.9, 0.999, 1e-8
    theta = {k: np.asarray(v, dtype=np.float64) for k, v in best.items()}
    m = {k: np.zeros_like(v) for k, v in theta.items()}
    s = {k: np.zeros_like(v) for k, v in theta.items()}
    for t in range(1, grad_iters + 1):
        _, gr = _objective_grad(g, node, theta)
        for k in theta:
            m[k] = b1 * m[k] + (1 - b1) * gr[k]
            s[k] = b2 * s[k] + (1 - b2) * gr[k] ** 2
            mh = m[k] / (1 - b1**t)
            sh = s[k] / (1 - b2**t)
            lo, hi = bounds[k]
            theta[k] = np.clip(theta[k] - lr * mh / (np.sqrt(sh) + eps), lo, hi)
        flat = {k: v.astype(g.node(k).np_dtype) for k, v in theta.items()}
        ok, obj = accept(flat)
        best_obj = min(best_obj, obj) if np.isfinite(obj) else best_obj
        if ok:
            x, w = _split(g, flat)
            return UnitTest(node.id, x, w, obj, time.perf_counter() - t0)
    return Failed("search budget exhausted", best_obj, time.perf_counter() - t0)


# ---------------------------------------------------------------- one-step training


def trainable(g: Graph) -> list:
    return g.nodes_of("Weight")


def full_weights(g: Graph, w: dict) -> dict:
    """Binding for every Weight node, falling back to stored values."""
    out = {}
    for n in trainable(g):
        if n.id in w:
            out[n.id] = np.asarray(w[n.id], dtype=n.np_dtype)
        elif n.init is not None:
            out[n.id] = np.asarray(n.init, dtype=n.np_dtype)
    return out


def loss_gradient(g: Graph, x_train: dict, w_0: dict, create_graph=False, overrides=None, x_vars=None):
    if g.loss_node is None:
        raise ValueError(f"graph {g.name!r} has no loss node")
    wl = {k: leaf(np.asarray(v, dtype=np.float64)) for k, v in full_weights(g, w_0).items()}
    xs = x_vars if x_vars is not None else {k: np.asarray(v, dtype=np.float64) for k, v in x_train.items()}
    with np.errstate(all="ignore"):
        values = execute_vars(g, xs, wl)
        loss = values.output(g.loss_node)
        gs = grad(loss, list(wl.values()), create_graph=create_graph, overrides=overrides)
    return dict(zip(wl, gs)), loss


def one_step_sgd(g: Graph, x_train: dict, w_0: dict, gamma: float) -> dict:
    """w_0 − γ ∇_w L(x_train; w_0), in the weights' dtypes."""
    gs, _ = loss_gradient(g, x_train, w_0)
    w0 = full_weights(g, w_0)
    out = {}
    for k, gk in gs.items():
        if not np.all(np.isfinite(gk)):
            raise NonFiniteGradient(f"training gradient of {k!r} is not finite")
        node = g.node(k)
        with np.errstate(over="ignore"):
            # a step past the dtype range gives inf weights, which inference then reports
            out[k] = (np.asarray(w0[k], dtype=np.float64) - gamma * gk).astype(node.np_dtype)
    return out


def verify_system_test(g: Graph, st: SystemTest) -> bool:
    try:
        w1 = one_step_sgd(g, st.x_train, st.w_0, st.gamma)
    except NonFiniteGradient:
        return False
    _, report = execute(g, st.x_infer, w1)
    watch = {st.defect_node} | g.descendants(st.defect_node)
    return any(nid in watch for nid in report.flagged)


def initial_weights(g: Graph, vr: ValidRanges, seed: int) -> dict:
    """w_0: stored values where present, otherwise a seeded uniform draw."""
    rng = np.random.default_rng([seed, 1])
    out = {}
    for n in trainable(g):
        if n.init is not None and not vr.explicit(n.id):
            out[n.id] = np.asarray(n.init, dtype=n.np_dtype)
        else:
            lo, hi = vr.range_of(n)
            out[n.id] = np.asarray(rng.uniform(lo, hi), dtype=n.np_dtype)
    return out


class _Found(Exception):
    pass


def gen_training_example(g: Graph, unit: UnitTest, w_0: dict, gamma: float = 1.0, seed: int = 0,
                         overrides=STRAIGHT_THROUGH, vr: ValidRanges | None = None,
                         max_iters: int = 300, budget_seconds: float = 1800.0) -> SystemTest | Failed:
    """Invert one SGD step by gradient matching (L-BFGS-B over the training inputs)."""
    t0 = time.perf_counter()
    vr = vr or ValidRanges()
    w_0 = full_weights(g, w_0)
    w_inf = full_weights(g, {**w_0, **unit.w_infer})
    target = {k: (np.asarray(w_0[k], np.float64) - np.asarray(w_inf[k], np.float64)) / gamma for k in w_0}
    inputs = g.nodes_of("Input")
    sizes = [int(np.prod(n.shape)) for n in inputs]
    offs = np.cumsum([0] + sizes)
    lo = np.concatenate([np.ravel(vr.range_of(n)[0]) for n in inputs]) if inputs else np.zeros(0)
    hi = np.concatenate([np.ravel(vr.range_of(n)[1]) for n in inputs]) if inputs else np.zeros(0)

    def unpack(z):
        return {n.id: z[offs[i]:offs[i + 1]].reshape(n.shape) for i, n in enumerate(inputs)}

    def fun(z):
        xv = {k: leaf(v.astype(np.float64)) for k, v in unpack(z).items()}
        gs, _ = loss_gradient(g, None, w_0, create_graph=True, overrides=overrides, x_vars=xv)
        total = 0.0
        for k, gk in gs.items():
            d = ops.sub(gk, target[k])
            total = ops.add(total, ops.sum(ops.mul(d, d)))
        if not is_var(total):
            return float(total), np.zeros_like(z)
        with np.errstate(all="ignore"):
            gx = grad(total, list(xv.values()), overrides=overrides)
        flat = np.concatenate([np.ravel(v) for v in gx]) if gx else np.zeros(0)
        val = float(total.value)
        if not np.isfinite(val):
            return 1e30, np.zeros_like(z)
        return val, np.where(np.isfinite(flat), flat, 0.0)

    found: dict = {}
    used = [0]

    def check(z):
        x_train = {k: v.astype(g.node(k).np_dtype) for k, v in unpack(np.clip(z, lo, hi)).items()}
        cand = SystemTest(unit.defect_node, x_train, unit.x_infer, w_0, gamma)
        if verify_system_test(g, cand):
            cand.verified = True
            found["st"] = cand
            raise _Found

    def callback(z):
        used[0] += 1
        check(z)
        if used[0] >= max_iters or time.perf_counter() - t0 > budget_seconds:
            raise StopIteration

    rng = np.random.default_rng([seed, 2])
    best = np.inf
    try:
        while used[0] < max_iters and time.perf_counter() - t0 <= budget_seconds:
            z0 = rng.uniform(lo, hi)
            check(z0)
            remaining = max_iters - used[0]
            try:
                res = minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                               callback=callback, options={"maxiter": remaining})
                best = min(best, float(res.fun))
                if res.nit == 0:
                    used[0] += 1
            except StopIteration:
                break
    except _Found:
        st = found["st"]
        st.iterations = used[0]
        st.elapsed = time.perf_counter() - t0
        st.match_loss = best
        return st
    return Failed("no verified training example within budget", best, time.perf_counter() - t0)
