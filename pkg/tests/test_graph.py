import json

import numpy as np
import pytest

from helpers import GB, corpus_names, load_case, running_example
from numguard.errors import CycleError, MissingBinding, SchemaError, ShapeMismatch, UnsupportedOperator
from numguard.graph import execute, graph_to_doc, parse_graph, serialize_graph, topo_order

TRAINED_W = {"n2": np.array([[5, -5], [-5, 5]], np.float32), "n4": np.array([0.9, -0.9], np.float32)}
INFER_X = {"n1": np.array([[10, -10]], np.float32), "n11": np.array([[1, 0]], np.float32)}


def test_running_example_structure():
    g, _, _ = running_example()
    assert len(g.nodes_of("Input")) == 2 and len(g.nodes_of("Weight")) == 2
    assert {n.id for n in g.operators_of("Log")} == {"n9", "n10"}
    assert g.loss_node == "n18"


def test_single_constant():
    g = parse_graph(json.dumps({"name": "c", "nodes": [{"id": "c", "kind": "Constant", "shape": [1],
                                                       "dtype": "f32", "init": [2.0]}], "edges": []}))
    assert len(g.nodes) == 1 and not g.edges


def test_cycle_rejected():
    b = GB()
    b.input("x", [1])
    b.op("n1", "Add", ["x", "n2"], [1])
    b.op("n2", "Neg", ["n1"], [1])
    with pytest.raises(CycleError):
        b.build()


@pytest.mark.parametrize("doc", [
    "{not json",
    json.dumps({"nodes": []}),
    json.dumps({"name": "x", "nodes": [{"id": "a", "kind": "Input", "shape": [0], "dtype": "f32"}], "edges": []}),
    json.dumps({"name": "x", "nodes": [{"id": "a", "kind": "Input", "shape": [1], "dtype": "i8"}], "edges": []}),
])
def test_schema_errors(doc):
    with pytest.raises(SchemaError):
        parse_graph(doc)


def test_unsupported_operator():
    b = GB()
    b.input("x", [2])
    b.op("y", "Erf", ["x"], [2])
    with pytest.raises(UnsupportedOperator):
        b.build()


def test_static_shape_mismatch():
    b = GB()
    b.input("a", [2, 3])
    b.input("b", [2, 3])
    b.op("m", "MatMul", ["a", "b"], [2, 3])
    with pytest.raises(ShapeMismatch):
        b.build()


def test_unconnected_slot_rejected():
    b = GB()
    b.input("a", [2])
    b.op("m", "Add", ["a"], [2])
    with pytest.raises((SchemaError, ShapeMismatch)):
        b.build()


def test_topo_order_examples():
    g, _, _ = running_example()
    order = topo_order(g)
    assert order.index("n3") < order.index("n5") < order.index("n6")
    b = GB()
    for name in ["k", "b", "z", "a"]:
        b.const(name, [1.0])
    assert topo_order(b.build()) == ["a", "b", "k", "z"]
    c = GB()
    c.input("a", [1])
    c.op("b", "Neg", ["a"], [1])
    c.op("c", "Exp", ["b"], [1])
    g2 = c.build()
    assert topo_order(g2) == ["a", "b", "c"] and topo_order(g2) == topo_order(g2)


def test_running_example_execution_flags_logs():
    g, _, _ = running_example()
    values, report = execute(g, INFER_X, TRAINED_W)
    assert {"n9", "n10"} <= set(report.flagged)
    assert 0.0 in np.ravel(values.input("n9", 1)).tolist() and 0.0 in np.ravel(values.input("n10", 1)).tolist()
    assert np.isneginf(values.output("n10")).any()


def test_small_inputs_are_finite():
    g, _, _ = running_example()
    _, report = execute(g, {"n1": np.array([[0.1, 0.2]], np.float32), "n11": np.array([[0.5, 0.5]], np.float32)},
                        {"n2": np.full((2, 2), 0.1, np.float32), "n4": np.zeros(2, np.float32)})
    assert not report


def test_div_by_exact_zero_flagged():
    b = GB(dtype="f32")
    b.input("a", [2])
    b.input("d", [2])
    b.op("q", "Div", ["a", "d"], [2])
    _, report = execute(b.build(), {"a": np.array([1.0, 0.0], np.float32), "d": np.zeros(2, np.float32)})
    assert "q" in report.flagged


def test_missing_binding():
    g, _, _ = running_example()
    with pytest.raises(MissingBinding):
        execute(g, {"n1": INFER_X["n1"]}, TRAINED_W)


def test_runtime_shape_mismatch():
    g, _, _ = running_example()
    with pytest.raises(ShapeMismatch):
        execute(g, {"n1": np.zeros((1, 3), np.float32), "n11": INFER_X["n11"]}, TRAINED_W)


@pytest.mark.parametrize("name", corpus_names())
def test_round_trip_bit_exact(name):
    g, _, vr = load_case(name)
    g2 = parse_graph(serialize_graph(g))
    assert graph_to_doc(g2) == graph_to_doc(g)
    assert serialize_graph(g2) == serialize_graph(g)
    x, w = vr.sample(g, np.random.default_rng(0))
    v1, r1 = execute(g, x, w)
    v2, r2 = execute(g2, x, w)
    for n in g.order:
        for a, b in zip(v1.outputs[n], v2.outputs[n]):
            assert np.array_equal(a, b, equal_nan=True)
    assert r1.flagged == r2.flagged


def test_init_values_round_trip_exactly():
    b = GB(dtype="f64")
    vals = np.array([0.1, 1 / 3, np.pi, 1e-300, -2.5e300])
    b.const("c", vals)
    b.op("y", "Neg", ["c"], [5])
    g = parse_graph(serialize_graph(b.build()))
    assert np.array_equal(g.node("c").init, vals)


def test_execute_deterministic():
    g, _, vr = running_example()
    x, w = vr.sample(g, np.random.default_rng(11))
    a, _ = execute(g, x, w)
    b, _ = execute(g, x, w)
    for n in g.order:
        assert all(np.array_equal(p, q, equal_nan=True) for p, q in zip(a.outputs[n], b.outputs[n]))
