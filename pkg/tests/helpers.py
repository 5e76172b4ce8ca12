"""Small graph-building and corpus helpers shared by the test modules."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from numguard.analysis import ValidRanges
from numguard.graph import Graph, load_graph, parse_graph

CORPUS = Path(str(resources.files("numguard") / "corpus"))


class GB:
    """Terse builder producing validated graphs."""

    def __init__(self, name="t", dtype="f64"):
        self.name, self.dtype = name, dtype
        self.nodes, self.edges = [], []
        self.loss = None

    def _add(self, nid, kind, shape, op=None, attrs=None, init=None, dtype=None):
        d = {"id": nid, "kind": kind, "shape": list(shape), "dtype": dtype or self.dtype}
        if op:
            d["op"] = op
        if attrs:
            d["attrs"] = attrs
        if init is not None:
            d["init"] = np.asarray(init, dtype=np.float64).tolist()
        self.nodes.append(d)
        return nid

    def input(self, nid, shape, **kw):
        return self._add(nid, "Input", shape, **kw)

    def weight(self, nid, shape, init=None, **kw):
        return self._add(nid, "Weight", shape, init=init, **kw)

    def const(self, nid, init, shape=None, **kw):
        shape = np.shape(init) if shape is None else shape
        return self._add(nid, "Constant", shape, init=init, **kw)

    def op(self, nid, op, srcs, shape, **attrs):
        self._add(nid, "Operator", shape, op=op, attrs=attrs or None)
        for slot, src in enumerate(srcs, start=1):
            sid, sslot = (src, 1) if isinstance(src, str) else src
            self.edges.append({"from": sid, "from_slot": sslot, "to": nid, "to_slot": slot})
        return nid

    def doc(self, **extra) -> dict:
        d = {"name": self.name, "nodes": self.nodes, "edges": self.edges}
        if self.loss:
            d["loss_node"] = self.loss
        d.update(extra)
        return d

    def build(self) -> Graph:
        return parse_graph(json.dumps(self.doc()))


def corpus_names() -> list[str]:
    return sorted(p.name[:-5] for p in CORPUS.glob("*.json") if not p.name.endswith(".config.json"))


def load_case(name: str) -> tuple[Graph, dict, ValidRanges]:
    g = load_graph(CORPUS / f"{name}.json")
    cp = CORPUS / f"{name}.config.json"
    cfg = json.loads(cp.read_text()) if cp.exists() else {}
    return g, cfg, ValidRanges.from_config(cfg)


def running_example():
    return load_case("running_example")


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))) if a.size else 0.0


def _retype(doc: dict, dtype: str) -> dict:
    doc = json.loads(json.dumps(doc))
    for n in doc["nodes"]:
        n["dtype"] = dtype
        if isinstance(n.get("attrs", {}).get("body"), dict):
            n["attrs"]["body"] = _retype(n["attrs"]["body"], dtype)
    return doc


def as_f64(g: Graph) -> Graph:
    """The same graph with every node computed in f64."""
    from numguard.graph import graph_to_doc

    return parse_graph(json.dumps(_retype(graph_to_doc(g), "f64")))
