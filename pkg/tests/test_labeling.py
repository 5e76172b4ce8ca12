import numpy as np

from helpers import GB, corpus_names, load_case
from numguard.analysis import analyze, label_fine_grained


def test_constant_shape_slot_is_labeled():
    b = GB()
    b.input("x", [2, 3])
    b.const("s", [3.0, 2.0])
    b.op("r", "Reshape", ["x", "s"], [3, 2])
    assert label_fine_grained(b.build()) == {"s"}


def test_shape_operator_stops_the_path():
    b = GB()
    b.input("x", [2, 3])
    b.op("s", "Shape", ["x"], [2])
    b.op("r", "Reshape", ["x", "s"], [2, 3])
    assert label_fine_grained(b.build()) == set()


def test_no_requiring_operators():
    b = GB()
    b.input("x", [2])
    b.weight("w", [2])
    b.op("y", "Mul", ["x", "w"], [2])
    b.op("z", "Log", ["y"], [2])
    assert label_fine_grained(b.build()) == set()


def test_path_through_arithmetic_is_followed():
    b = GB()
    b.input("x", [4])
    b.const("k", [1.0])
    b.const("one", [1.0])
    b.op("i", "Add", ["k", "one"], [1])
    b.op("g", "Gather", ["x", "i"], [1], axis=0)
    assert label_fine_grained(b.build()) == {"k", "one"}


def test_labeled_nodes_are_finest_on_corpus():
    # labeled constants must come out as points; labeled inputs keep their range elementwise
    for name in corpus_names():
        g, _, vr = load_case(name)
        st = analyze(g, vr)
        for nid in st.labeled:
            a = st.output(nid)
            assert a.is_finest(), (name, nid)
            if g.node(nid).kind == "Constant":
                assert a.is_point(), (name, nid)


def test_loop_trip_and_condition_are_labeled():
    g, _, _ = load_case("loop_doubling")
    assert {"trip", "cond"} <= label_fine_grained(g)
    g2, _, _ = load_case("reshape_dynamic")
    lab = label_fine_grained(g2)
    assert {"i0", "tail"} <= lab and "x" not in lab
    assert np.all(np.isfinite(analyze(g2).output("target").lo))
