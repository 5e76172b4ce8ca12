"""Computational-graph model: JSON (de)serialization, validation, ordering
and concrete execution.

Slots are 1-based on both ends of an edge.  Every node has one output except
``Loop``, whose outputs are its final loop-carried values.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import CycleError, MissingBinding, SchemaError, ShapeMismatch, UnsupportedOperator
from .tensor import operators
from .tensor.autodiff import is_var, value_of

DTYPES = {"f32": np.float32, "f64": np.float64}
INITIAL_KINDS = ("Input", "Weight", "Constant")
NODE_KINDS = INITIAL_KINDS + ("Operator",)
LOOP_CAP = 1_000_000


@dataclass(frozen=True, eq=False)
class Node:
    id: str
    kind: str
    op: str | None = None
    attrs: dict = field(default_factory=dict)
    shape: tuple = ()
    dtype: str = "f32"
    init: np.ndarray | None = None

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def is_initial(self) -> bool:
        return self.kind != "Operator"

    @property
    def label(self) -> str:
        return self.op if self.kind == "Operator" else self.kind


@dataclass(frozen=True)
class Edge:
    src: str
    src_slot: int
    dst: str
    dst_slot: int


class Graph:
    """Validated, immutable computational graph."""

    def __init__(
        self,
        name: str,
        nodes: Iterable[Node],
        edges: Iterable[Edge],
        loss_node: str | None = None,
        inputs: list[str] | None = None,
        outputs: list[tuple[str, int]] | None = None,
    ):
        self.name = name
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.edges: tuple[Edge, ...] = tuple(edges)
        self.loss_node = loss_node
        # interface of a Loop body; unused for top-level graphs
        self.inputs = list(inputs or [])
        self.outputs = list(outputs or [])
        self._by_id: dict[str, Node] = {}
        for n in self.nodes:
            if n.id in self._by_id:
                raise SchemaError(f"duplicate node id {n.id!r}")
            self._by_id[n.id] = n
        self._in: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        self._out: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            if e.src not in self._by_id or e.dst not in self._by_id:
                raise SchemaError(f"edge references unknown node: {e}")
            self._in[e.dst].append(e)
            self._out[e.src].append(e)
        for lst in self._in.values():
            lst.sort(key=lambda e: e.dst_slot)
        self._validate_structure()
        self.order: tuple[str, ...] = tuple(_kahn(self))
        self.out_shapes: dict[str, list[tuple]] = {}
        self.static_values: dict[str, list] = {}
        _infer_shapes(self)

    # ------------------------------------------------------------ access

    def node(self, nid: str) -> Node:
        try:
            return self._by_id[nid]
        except KeyError:
            raise SchemaError(f"unknown node {nid!r}") from None

    def __contains__(self, nid) -> bool:
        return nid in self._by_id

    def in_edges(self, nid: str) -> list[Edge]:
        return self._in[nid]

    def out_edges(self, nid: str) -> list[Edge]:
        return self._out[nid]

    def producers(self, nid: str) -> list[tuple[str, int]]:
        return [(e.src, e.src_slot) for e in self._in[nid]]

    def consumers(self, nid: str) -> list[Edge]:
        return self._out[nid]

    def nodes_of(self, *kinds: str) -> list[Node]:
        return [self._by_id[i] for i in self.order if self._by_id[i].kind in kinds]

    def operators_of(self, *ops: str) -> list[Node]:
        return [self._by_id[i] for i in self.order if self._by_id[i].op in ops]

    def input_shape(self, nid: str, slot: int) -> tuple:
        e = self._in[nid][slot - 1]
        return self.out_shapes[e.src][e.src_slot - 1]

    def position(self, nid: str) -> int:
        if not hasattr(self, "_pos"):
            self._pos = {n: i for i, n in enumerate(self.order)}
        return self._pos[nid]

    def descendants(self, nid: str) -> set[str]:
        seen, stack = set(), [nid]
        while stack:
            for e in self._out[stack.pop()]:
                if e.dst not in seen:
                    seen.add(e.dst)
                    stack.append(e.dst)
        return seen

    def ancestors(self, nid: str) -> set[str]:
        seen, stack = set(), [nid]
        while stack:
            for e in self._in[stack.pop()]:
                if e.src not in seen:
                    seen.add(e.src)
                    stack.append(e.src)
        return seen

    # ------------------------------------------------------------ validation

    def _validate_structure(self):
        if self.loss_node is not None and self.loss_node not in self._by_id:
            raise SchemaError(f"loss_node {self.loss_node!r} is not a node")
        for n in self.nodes:
            edges = self._in[n.id]
            if n.is_initial:
                if edges:
                    raise SchemaError(f"initial node {n.id!r} has incoming edges")
                if n.kind == "Constant" and n.init is None:
                    raise SchemaError(f"Constant {n.id!r} needs an init value")
                continue
            info = operators.info(n.op)
            slots = [e.dst_slot for e in edges]
            if slots != list(range(1, len(slots) + 1)):
                raise SchemaError(f"node {n.id!r} input slots must be 1..k without gaps, got {slots}")
            k = len(slots)
            if k < info.min_inputs or (info.max_inputs is not None and k > info.max_inputs):
                raise SchemaError(f"{n.op} node {n.id!r} has {k} inputs")
            if n.op == "Loop":
                body = n.attrs.get("body")
                if not isinstance(body, Graph):
                    raise SchemaError(f"Loop {n.id!r} needs a body graph")
                carried = k - 2
                if len(body.inputs) != 2 + carried or len(body.outputs) != 1 + carried:
                    raise SchemaError(f"Loop {n.id!r} body interface does not match {carried} carried values")
        for e in self.edges:
            src = self._by_id[e.src]
            nout = 1 if src.is_initial else operators.n_outputs(src.op, len(self._in[src.id]))
            if not 1 <= e.src_slot <= nout:
                raise SchemaError(f"edge from {e.src!r} uses output slot {e.src_slot}")
        if self.loss_node is not None:
            ln = self._by_id[self.loss_node]
            if int(np.prod(ln.shape)) != 1:
                raise SchemaError("loss node must be a scalar")
        for nid in self.inputs:
            if nid not in self._by_id or self._by_id[nid].kind != "Input":
                raise SchemaError(f"body input {nid!r} must be an Input node")
        for nid, _ in self.outputs:
            if nid not in self._by_id:
                raise SchemaError(f"body output {nid!r} is not a node")


def _kahn(g: Graph) -> list[str]:
    indeg = {n.id: len(g.in_edges(n.id)) for n in g.nodes}
    heap = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        nid = heapq.heappop(heap)
        order.append(nid)
        for e in g.out_edges(nid):
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                heapq.heappush(heap, e.dst)
    if len(order) != len(g.nodes):
        raise CycleError("graph contains a cycle: " + ", ".join(sorted(k for k, d in indeg.items() if d > 0)))
    return order


def topo_order(g: Graph) -> list[str]:
    """Producers before consumers; ties broken by lexicographic node id."""
    return list(g.order)


# ---------------------------------------------------------------- shape inference


def _infer_shapes(g: Graph) -> None:
    """Static shapes for every output; constant-folds where all inputs are known.

    Operators whose output shape depends on unknown input values keep the
    declared shape, which is re-checked at execution time.
    """
    for nid in g.order:
        n = g.node(nid)
        if n.is_initial:
            shape = tuple(n.shape)
            if n.init is not None and tuple(n.init.shape) != shape:
                raise ShapeMismatch(f"init of {nid!r} has shape {n.init.shape}, declared {shape}")
            g.out_shapes[nid] = [shape]
            g.static_values[nid] = [n.init if n.kind == "Constant" else None]
            continue
        prods = g.producers(nid)
        in_shapes = [g.out_shapes[s][k - 1] for s, k in prods]
        in_static = [g.static_values[s][k - 1] for s, k in prods]
        info = operators.info(n.op)
        static = None
        if n.op == "Shape":
            static = [np.asarray(in_shapes[0], dtype=np.float64)]
            shapes = [static[0].shape]
        elif n.op == "Loop":
            shapes = [tuple(s) for s in in_shapes[2:]]
            body = n.attrs["body"]
            for (bid, bslot), s in zip(body.outputs[1:], shapes):
                if body.out_shapes[bid][bslot - 1] != s:
                    raise ShapeMismatch(f"Loop {nid!r} body changes a carried shape")
        elif all(v is not None for v in in_static):
            static = _eval_static(n, in_static)
            shapes = [tuple(np.shape(v)) for v in static]
        elif info.dynamic_shape and any(
            in_static[s - 1] is None for s in info.shape_slots if s <= len(in_static)
        ):
            shapes = [tuple(n.shape)]
        else:
            dummies = [v if v is not None else np.zeros(s) for v, s in zip(in_static, in_shapes)]
            shapes = [tuple(np.shape(v)) for v in _eval_static(n, dummies)]
        if shapes[0] != tuple(n.shape):
            raise ShapeMismatch(f"node {nid!r} ({n.op}) infers shape {shapes[0]}, declared {tuple(n.shape)}")
        g.out_shapes[nid] = shapes
        g.static_values[nid] = static or [None] * len(shapes)


def _eval_static(n: Node, inputs):
    try:
        outs = operators.eval_node(n.op, inputs, n.attrs, declared_shape=n.shape)
    except (ShapeMismatch, UnsupportedOperator):
        raise
    except (ValueError, IndexError, TypeError) as exc:
        raise ShapeMismatch(f"node {n.id!r} ({n.op}): {exc}") from exc
    return [np.asarray(o, dtype=n.np_dtype) for o in outs]


# ---------------------------------------------------------------- serialization


def _tensor_to_json(t: np.ndarray):
    return np.asarray(t, dtype=np.float64).tolist()


def _attrs_to_json(attrs: dict) -> dict:
    out = {}
    for k, v in attrs.items():
        out[k] = graph_to_doc(v) if isinstance(v, Graph) else v
    return out


def graph_to_doc(g: Graph) -> dict:
    doc = {
        "name": g.name,
        "nodes": [],
        "edges": [
            {"from": e.src, "from_slot": e.src_slot, "to": e.dst, "to_slot": e.dst_slot} for e in g.edges
        ],
    }
    for n in g.nodes:
        nd = {"id": n.id, "kind": n.kind, "shape": list(n.shape), "dtype": n.dtype}
        if n.op is not None:
            nd["op"] = n.op
        if n.attrs:
            nd["attrs"] = _attrs_to_json(n.attrs)
        if n.init is not None:
            nd["init"] = _tensor_to_json(n.init)
        doc["nodes"].append(nd)
    if g.loss_node is not None:
        doc["loss_node"] = g.loss_node
    if g.inputs:
        doc["inputs"] = list(g.inputs)
    if g.outputs:
        doc["outputs"] = [{"node": i, "slot": s} for i, s in g.outputs]
    return doc


def serialize_graph(g: Graph) -> str:
    return json.dumps(graph_to_doc(g), indent=1, sort_keys=True)


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise SchemaError(f"{where}: missing field {key!r}")
    return d[key]


def _parse_node(d) -> Node:
    if not isinstance(d, dict):
        raise SchemaError("node entries must be objects")
    nid = _req(d, "id", "node")
    if not isinstance(nid, str) or not nid:
        raise SchemaError("node id must be a non-empty string")
    kind = _req(d, "kind", nid)
    if kind not in NODE_KINDS:
        raise SchemaError(f"{nid}: unknown kind {kind!r}")
    dtype = d.get("dtype", "f32")
    if dtype not in DTYPES:
        raise SchemaError(f"{nid}: dtype must be one of {sorted(DTYPES)}")
    shape = _req(d, "shape", nid)
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in shape):
        raise SchemaError(f"{nid}: shape must be a list of integers >= 1")
    op = d.get("op")
    if kind == "Operator":
        if not isinstance(op, str):
            raise SchemaError(f"{nid}: Operator nodes need an op")
        operators.info(op)
    elif op is not None:
        raise SchemaError(f"{nid}: only Operator nodes carry an op")
    attrs = dict(d.get("attrs") or {})
    if not isinstance(attrs, dict):
        raise SchemaError(f"{nid}: attrs must be an object")
    if "body" in attrs:
        attrs["body"] = _parse_doc(attrs["body"], body=True)
    init = d.get("init")
    if init is not None:
        try:
            init = np.asarray(init, dtype=np.float64).astype(DTYPES[dtype])
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{nid}: bad init tensor") from exc
    return Node(nid, kind, op, attrs, tuple(shape), dtype, init)


def _parse_doc(doc, body=False) -> Graph:
    if not isinstance(doc, dict):
        raise SchemaError("graph document must be a JSON object")
    if not body:
        _req(doc, "name", "graph")
    nodes_doc = _req(doc, "nodes", "graph")
    if not isinstance(nodes_doc, list):
        raise SchemaError("nodes must be a list")
    nodes = [_parse_node(d) for d in nodes_doc]
    edges = []
    for e in doc.get("edges", []):
        try:
            edges.append(Edge(str(e["from"]), int(e.get("from_slot", 1)), str(e["to"]), int(e["to_slot"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed edge {e!r}") from exc
    outputs = []
    for o in doc.get("outputs", []):
        if isinstance(o, str):
            outputs.append((o, 1))
        else:
            outputs.append((str(o["node"]), int(o.get("slot", 1))))
    return Graph(
        str(doc.get("name", "graph")),
        nodes,
        edges,
        loss_node=doc.get("loss_node"),
        inputs=list(doc.get("inputs", [])),
        outputs=outputs,
    )


def parse_graph(document) -> Graph:
    """Build a validated Graph from JSON text (or an already decoded dict)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from exc
    return _parse_doc(document)


def load_graph(path) -> Graph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


# ---------------------------------------------------------------- execution


@dataclass
class FiniteReport:
    """Nodes whose output holds NaN or an infinity, in topological order."""

    flagged: list[str] = field(default_factory=list)

    @property
    def first(self) -> str | None:
        return self.flagged[0] if self.flagged else None

    def __contains__(self, nid) -> bool:
        return nid in self.flagged

    def __bool__(self) -> bool:
        return bool(self.flagged)

    def __len__(self) -> int:
        return len(self.flagged)


class NodeValues:
    """Per-node output tensors of one execution, with input lookup."""

    def __init__(self, g: Graph, outputs: dict[str, list]):
        self.graph = g
        self.outputs = outputs

    def output(self, nid: str, slot: int = 1):
        return self.outputs[nid][slot - 1]

    def inputs(self, nid: str) -> list:
        return [self.outputs[s][k - 1] for s, k in self.graph.producers(nid)]

    def input(self, nid: str, slot: int):
        e = self.graph.in_edges(nid)[slot - 1]
        return self.outputs[e.src][e.src_slot - 1]

    def __getitem__(self, nid):
        return self.output(nid)


def _bind(g: Graph, x: Mapping | None, w: Mapping | None, concrete: bool) -> dict:
    x = dict(x or {})
    w = dict(w or {})
    vals = {}
    for n in g.nodes:
        if n.kind == "Constant":
            v = n.init
        elif n.kind == "Input":
            if n.id not in x:
                raise MissingBinding(f"no value bound for input {n.id!r}")
            v = x[n.id]
        elif n.kind == "Weight":
            if n.id in w:
                v = w[n.id]
            elif n.init is not None:
                v = n.init
            else:
                raise MissingBinding(f"no value bound for weight {n.id!r}")
        else:
            continue
        if tuple(np.shape(value_of(v))) != tuple(n.shape):
            raise ShapeMismatch(f"{n.id!r} bound with shape {np.shape(value_of(v))}, declared {n.shape}")
        if concrete and not is_var(v):
            v = np.asarray(v, dtype=n.np_dtype)
        vals[n.id] = v
    return vals


def run(g: Graph, initial: Mapping[str, object], concrete: bool | None = None) -> dict[str, list]:
    """Evaluate every node given values for all initial nodes.

    In concrete mode (the default when no Var is bound) every output is cast
    to its node's dtype; otherwise values stay float64 Vars/arrays.
    """
    if concrete is None:
        concrete = not any(is_var(v) for v in initial.values())
    out: dict[str, list] = {}
    with np.errstate(all="ignore"):
        for nid in g.order:
            n = g.node(nid)
            if n.is_initial:
                v = initial[nid]
                out[nid] = [np.asarray(v, dtype=n.np_dtype) if concrete and not is_var(v) else v]
                continue
            ins = [out[s][k - 1] for s, k in g.producers(nid)]
            try:
                res = operators.eval_node(n.op, ins, n.attrs, declared_shape=n.shape)
            except (ValueError, IndexError, TypeError) as exc:
                raise ShapeMismatch(f"node {nid!r} ({n.op}): {exc}") from exc
            if concrete:
                res = [np.asarray(r, dtype=n.np_dtype) for r in res]
            shapes = g.out_shapes[nid]
            for r, s in zip(res, shapes):
                if tuple(np.shape(value_of(r))) != tuple(s):
                    raise ShapeMismatch(f"node {nid!r} produced {np.shape(value_of(r))}, expected {s}")
            out[nid] = res
    return out


def finite_report(g: Graph, outputs: Mapping[str, list]) -> FiniteReport:
    flagged = [
        nid
        for nid in g.order
        if any(not np.all(np.isfinite(value_of(v))) for v in outputs[nid])
    ]
    return FiniteReport(flagged)


def execute(g: Graph, x: Mapping | None = None, w: Mapping | None = None) -> tuple[NodeValues, FiniteReport]:
    """Concrete execution in each node's dtype; non-finite values propagate."""
    outs = run(g, _bind(g, x, w, concrete=True), concrete=True)
    return NodeValues(g, outs), finite_report(g, outs)


def execute_vars(g: Graph, x: Mapping | None = None, w: Mapping | None = None) -> NodeValues:
    """Float64 execution where bound Vars are tracked for differentiation."""
    outs = run(g, _bind(g, x, w, concrete=False), concrete=False)
    return NodeValues(g, outs)


def run_loop(inputs: list, attrs: dict) -> list:
    """ONNX Loop: inputs (M, cond, v...), body (iter, cond, v...) -> (cond, v...)."""
    body: Graph = attrs["body"]
    m = float(np.asarray(value_of(inputs[0]), dtype=np.float64).ravel()[0])
    cond = bool(np.asarray(value_of(inputs[1])).ravel()[0] != 0)
    carried = list(inputs[2:])
    concrete = not any(is_var(v) for v in inputs)
    if np.isnan(m):
        raise ShapeMismatch("Loop trip count is NaN")
    i = 0
    while i < m and cond:
        if i >= LOOP_CAP:
            raise ShapeMismatch("Loop exceeded the iteration cap")
        it_node, cond_node = body.node(body.inputs[0]), body.node(body.inputs[1])
        bind = {
            it_node.id: np.full(it_node.shape, float(i), dtype=it_node.np_dtype),
            cond_node.id: np.full(cond_node.shape, float(cond), dtype=cond_node.np_dtype),
        }
        for bid, v in zip(body.inputs[2:], carried):
            bind[bid] = v
        for n in body.nodes:
            if n.kind == "Constant":
                bind[n.id] = n.init
            elif n.kind == "Input" and n.id not in bind:
                raise MissingBinding(f"body input {n.id!r} is not part of the loop interface")
            elif n.kind == "Weight":
                if n.init is None:
                    raise MissingBinding(f"body weight {n.id!r} needs an init value")
                bind[n.id] = n.init
        for n in body.nodes:
            if n.kind == "Input" and n.id in bind:
                v = bind[n.id]
                if concrete:
                    bind[n.id] = np.asarray(value_of(v), dtype=n.np_dtype).reshape(n.shape)
        outs = run(body, bind, concrete=concrete)
        res = [outs[bid][slot - 1] for bid, slot in body.outputs]
        cond = bool(np.asarray(value_of(res[0])).ravel()[0] != 0)
        carried = res[1:]
        i += 1
    return carried
