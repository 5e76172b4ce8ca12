import math

import numpy as np
import pytest

from helpers import GB, corpus_names, load_case, running_example
from numguard.analysis import ValidRanges, analyze
from numguard.detect import DEFECT_OPS, detect, in_invalid_range, invalid_range
from numguard.errors import NotDefectProne
from numguard.graph import execute
from numguard.testgen import defect_objective, triggers

TINY32 = float(np.finfo(np.float32).tiny)


def test_invalid_range_table():
    log = invalid_range("Log", "f32")
    assert dict(log.regions)[1] == (-math.inf, 2.0 ** -126)
    exp = invalid_range("Exp", "f32")
    assert abs(dict(exp.regions)[1][0] - 88.7228) < 1e-4
    assert invalid_range("Div", "f64").slot == 2
    assert invalid_range("Range", "f32").slot == 3
    with pytest.raises(NotDefectProne):
        invalid_range("Add", "f32")


def test_running_example_reports():
    g, cfg, vr = running_example()
    reps = detect(g, analyze(g, vr))
    assert sorted(r.node for r in reps) == ["n10", "n9"]
    for r in reps:
        assert r.op == "Log" and r.slot == 1
        assert r.witness == (0.0, TINY32)


def test_running_example_modes_agree():
    g, _, vr = running_example()
    for mode in ("tight", "fast"):
        assert sorted(r.node for r in detect(g, analyze(g, vr, mode=mode))) == ["n10", "n9"]


def test_f64_softmax_floor_is_representable():
    # in f64 the smallest softmax output, 1/(1+e^420), stays above U_min; 1 - softmax still hits 0
    from helpers import as_f64

    g, _, vr = running_example()
    g = as_f64(g)
    st = analyze(g, vr)
    lo = st.input("n10", 1).hull()[0]
    assert lo == pytest.approx(math.exp(-420.0), rel=1e-9)
    assert [r.node for r in detect(g, st)] == ["n9"]


def _unary(op, lo, hi, dtype="f32"):
    b = GB(dtype=dtype)
    b.input("x", [3])
    b.op("y", op, ["x"], [3])
    return b.build(), ValidRanges(ranges={"x": [lo, hi]})


def test_safe_log_not_reported():
    g, vr = _unary("Log", 1.0, 2.0)
    assert detect(g, analyze(g, vr)) == []


def test_div_reports_divisor_slot():
    b = GB(dtype="f32")
    b.input("a", [2])
    b.input("d", [2])
    b.op("q", "Div", ["a", "d"], [2])
    g = b.build()
    reps = detect(g, analyze(g, ValidRanges(ranges={"a": [3.0, 4.0], "d": [-0.5, 0.5]})))
    assert len(reps) == 1 and reps[0].slot == 2
    assert reps[0].witness == (-TINY32, TINY32)


def test_exp_overflow_reported():
    g, vr = _unary("Exp", 0.0, 100.0)
    (r,) = detect(g, analyze(g, vr))
    assert r.witness[1] == 100.0 and abs(r.witness[0] - 88.7228) < 1e-4
    g, vr = _unary("Exp", 0.0, 80.0)
    assert detect(g, analyze(g, vr)) == []


def test_pow_needs_both_slots():
    b = GB(dtype="f32")
    b.input("x", [2])
    b.input("e", [])
    b.op("p", "Pow", ["x", "e"], [2])
    g = b.build()
    assert detect(g, analyze(g, ValidRanges(ranges={"x": [-1.0, 1.0], "e": [1.0, 2.0]}))) == []
    assert detect(g, analyze(g, ValidRanges(ranges={"x": [0.5, 1.0], "e": [-2.0, -1.0]}))) == []
    assert [r.node for r in detect(g, analyze(g, ValidRanges(ranges={"x": [-1.0, 1.0], "e": [-2.0, 1.0]})))] == ["p"]


def test_objective_examples():
    g, _ = _unary("Log", 0.0, 1.0)
    assert defect_objective(g, "y", {"x": np.array([0.0, 1.0, 0.5], np.float32)}) <= 0
    assert defect_objective(g, "y", {"x": np.ones(3, np.float32)}) == pytest.approx(1.0 - TINY32)
    g, _ = _unary("Exp", 0.0, 1.0)
    x = np.array([100.0, 0.0, 1.0], np.float32)
    assert defect_objective(g, "y", {"x": x}) == pytest.approx(math.log(np.finfo(np.float32).max) - 100.0)


@pytest.mark.parametrize("op,val", [("Log", TINY32), ("Sqrt", 0.0), ("Reciprocal", -TINY32),
                                    ("Exp", float(np.log(np.finfo(np.float32).max)))])
def test_objective_boundary(op, val):
    g, _ = _unary(op, 0.0, 1.0)
    x = {"x": np.array([val, 1.0, 1.0], np.float32)}
    inside, _, obj = triggers(g, "y", x)
    assert inside and obj <= 0


@pytest.mark.parametrize("name", corpus_names())
def test_objective_sign_matches_membership(name):
    g, _, vr = load_case(name)
    nodes = g.operators_of(*DEFECT_OPS)
    rng = np.random.default_rng(99)
    for k in range(1000):
        x, w = vr.sample(g, rng)
        if k % 4 == 0:
            # pull every free value towards zero so defects actually trigger now and then
            x = {n: (v * rng.uniform(0, 1e-3)).astype(v.dtype) for n, v in x.items()}
        values, _ = execute(g, x, w)
        for n in nodes:
            obj = defect_objective(g, n.id, x, w)
            assert (obj <= 0) == in_invalid_range(g, n, values), (n.id, obj)


def test_reports_are_deterministic():
    for name in corpus_names():
        g, _, vr = load_case(name)
        a = [r.to_json() for r in detect(g, analyze(g, vr))]
        b = [r.to_json() for r in detect(g, analyze(g, vr))]
        assert a == b
