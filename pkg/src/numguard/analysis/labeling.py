"""Backward labeling of initial nodes that need elementwise abstractions.

Values that decide shapes, indices or control flow must be known exactly for
the analysis to resolve them, so every initial node with a path into such an
operand is abstracted at the finest granularity.  Paths through operators
that only look at shapes (or draw fresh random data) do not count.
"""

from __future__ import annotations

from ..graph import Graph

# operator -> 1-based input slots that must be known elementwise
REQUIRING: dict[str, frozenset] = {
    "Reshape": frozenset({2}),
    "Slice": frozenset({2, 3, 4, 5}),
    "Squeeze": frozenset({2}),
    "Unsqueeze": frozenset({2}),
    "Tile": frozenset({2, 3}),
    "Loop": frozenset({1, 2}),
    "SequenceInsert": frozenset({3}),
    "ConstantOfShape": frozenset({1}),
    "Gather": frozenset({2}),
    "GatherND": frozenset({2}),
    "ReduceSum": frozenset({2}),
    "ScatterElements": frozenset({2}),
    "Expand": frozenset({2}),
    "Split": frozenset({2}),
    "Pad": frozenset({2, 3}),
    "NegativeLogLikelihoodLoss": frozenset({2}),
    "Clip": frozenset({2, 3}),
    "OneHot": frozenset({2}),
    "Resize": frozenset({2, 3, 4}),
}

STOPPING = frozenset({"Shape", "RandomNormalLike", "RandomUniformLike"})


def needs_fine(g: Graph, seeds=()) -> dict[str, bool]:
    """For every node: does its value reach a requiring slot along a valid path?

    ``seeds`` are nodes whose values are needed exactly for other reasons
    (a loop body's condition output, for example).
    """
    seeds = set(seeds)
    need: dict[str, bool] = {}
    for nid in reversed(g.order):
        flag = nid in seeds
        for e in g.out_edges(nid):
            if flag:
                break
            dst = g.node(e.dst)
            if e.dst_slot in requiring_slots(dst):
                flag = True
            elif dst.op not in STOPPING and need[e.dst]:
                flag = True
        need[nid] = flag
    return need


def requiring_slots(node) -> frozenset:
    slots = REQUIRING.get(node.op, frozenset())
    if node.op == "Loop":
        body = node.attrs["body"]
        needed = loop_body_needs(body)
        slots = slots | {k + 1 for k in range(2, len(body.inputs)) if body.inputs[k] in needed}
    return slots


def loop_body_needs(body: Graph) -> set[str]:
    """Body inputs whose values must be exact: fixpoint over carried values."""
    seeds = {body.outputs[0][0]}
    while True:
        need = needs_fine(body, seeds)
        grown = set(seeds)
        for k, (oid, _) in enumerate(body.outputs[1:]):
            if need[body.inputs[2 + k]]:
                grown.add(oid)
        if grown == seeds:
            return {i for i in body.inputs if need[i]}
        seeds = grown


def label_fine_grained(g: Graph) -> set[str]:
    """Initial nodes whose abstraction must be at the finest granularity."""
    need = needs_fine(g)
    return {n.id for n in g.nodes if n.is_initial and need[n.id]}
