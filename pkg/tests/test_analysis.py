import itertools
import math

import numpy as np
import pytest

from helpers import GB, as_f64, corpus_names, load_case, rel_err, running_example
from numguard import interval as iv
from numguard.analysis import (
    ValidRanges,
    analyze,
    endpoint_gradients,
    transfer_conv,
    transfer_elementwise,
    transfer_matmul_fast,
    transfer_matmul_tight,
    transfer_softmax,
)
from numguard.analysis.transfer import interval_matmul
from numguard.errors import DomainError, LoopBudgetExceeded, NotDifferentiableMode
from numguard.fix import FixRequest, precond_loss
from numguard.graph import execute
from numguard.tensor import ops
from numguard.tensor.autodiff import value_of
from numguard.tensor.operators import eval_node


def _hull(a):
    return tuple(float(v) for v in a.hull())


def _random_pi(rng, shape, finest=False, scale=5.0):
    splits = iv.finest(shape) if finest else tuple(
        tuple(sorted({0} | set(rng.integers(0, n, size=rng.integers(0, n + 1)).tolist()))) for n in shape)
    bshape = tuple(len(s) for s in splits)
    c = rng.uniform(-scale, scale, bshape)
    r = rng.uniform(0, scale, bshape)
    return iv.make(c - r, c + r, splits, shape)


def _sample_in(rng, a):
    lo, hi = (np.asarray(value_of(t)) for t in a.expand())
    return rng.uniform(lo, hi)


# ---------------------------------------------------------------- running example


def test_running_example_bounds():
    g, _, vr = running_example()
    st = analyze(g, vr)
    assert _hull(st.input("n5", 1)) == (-200.0, 200.0)
    assert _hull(st.input("n6", 1)) == (-210.0, 210.0)
    lo, hi = _hull(st.output("n8"))
    assert 0.0 <= lo and hi <= 1.0


def test_all_constant_graph_matches_execution():
    b = GB(dtype="f32")
    b.const("a", [[0.5, -1.25], [2.0, 3.0]], dtype="f32")
    b.const("m", [[1.0], [-0.5]], dtype="f32")
    b.op("p", "MatMul", ["a", "m"], [2, 1])
    b.op("e", "Exp", ["p"], [2, 1])
    b.op("s", "Softmax", ["e"], [2, 1], axis=0)
    b.op("l", "Log", ["s"], [2, 1])
    g = b.build()
    st = analyze(g)
    vals, _ = execute(g)
    for nid in g.order:
        a = st.output(nid)
        assert a.is_point()
        assert np.array_equal(a.expand()[0], np.asarray(vals.output(nid), np.float64))


@pytest.mark.parametrize("name", corpus_names())
def test_monte_carlo_soundness(name):
    g, _, vr = load_case(name)
    st = analyze(g, vr)
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        x, w = vr.sample(g, rng)
        vals, _ = execute(g, x, w)
        for nid in g.order:
            for slot, v in enumerate(vals.outputs[nid], start=1):
                bad = iv.violations(st.output(nid, slot), v)
                assert not bad.any(), (nid, slot)


# ---------------------------------------------------------------- matmul


def test_matmul_tight_example():
    a = iv.uniform((1, 2), -10.0, 10.0)
    b = iv.uniform((2, 1), -10.0, 10.0)
    assert _hull(transfer_matmul_tight(a, b)) == (-200.0, 200.0)


def test_matmul_points_exact():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    for f in (transfer_matmul_tight, transfer_matmul_fast):
        r = f(iv.point(x), iv.point(y))
        lo, hi = r.expand()
        assert rel_err(lo, x @ y) < 1e-12 and rel_err(hi, x @ y) < 1e-12


def test_matmul_fast_nonnegative_points():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(0, 3, (2, 3)), rng.uniform(0, 3, (3, 4))
    lo, hi = transfer_matmul_fast(iv.point(x), iv.point(y)).expand()
    assert rel_err(lo, x @ y) < 1e-12 and rel_err(hi, x @ y) < 1e-12


def _matmul_oracle(a, b):
    la, ua = a.expand()
    lb, ub = b.expand()
    m, k = la.shape
    n = lb.shape[1]
    lo, hi = np.zeros((m, n)), np.zeros((m, n))
    for i, j in itertools.product(range(m), range(n)):
        for t in range(k):
            c = [p * q for p in (la[i, t], ua[i, t]) for q in (lb[t, j], ub[t, j])]
            lo[i, j] += min(c)
            hi[i, j] += max(c)
    return lo, hi


def test_matmul_tight_is_exact_on_500_instances():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(500):
        m, k, n = rng.integers(1, 5, 3)
        a, b = _random_pi(rng, (m, k)), _random_pi(rng, (k, n))
        lo, hi = transfer_matmul_tight(a, b).expand()
        olo, ohi = _matmul_oracle(a, b)
        worst = max(worst, rel_err(lo, olo), rel_err(hi, ohi))
    assert worst <= 1e-9


def test_matmul_fast_contains_tight_and_samples():
    rng = np.random.default_rng(4)
    for _ in range(300):
        m, k, n = rng.integers(1, 5, 3)
        a, b = _random_pi(rng, (m, k)), _random_pi(rng, (k, n))
        t, f = transfer_matmul_tight(a, b), transfer_matmul_fast(a, b)
        tl, th = t.expand()
        fl, fh = f.expand()
        assert np.all(fl <= tl + 1e-9 * np.abs(tl)) and np.all(fh >= th - 1e-9 * np.abs(th))
        for _ in range(5):
            v = _sample_in(rng, a) @ _sample_in(rng, b)
            assert iv.contains(f, v, tol=1e-9) and iv.contains(t, v, tol=1e-9)


def test_matmul_batched():
    rng = np.random.default_rng(5)
    a, b = _random_pi(rng, (2, 3, 4), finest=True), _random_pi(rng, (4, 2), finest=True)
    for mode in ("tight", "fast"):
        r = interval_matmul(a, b, mode)
        assert r.shape == (2, 3, 2)
        for _ in range(50):
            assert iv.contains(r, _sample_in(rng, a) @ _sample_in(rng, b), tol=1e-9)


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    r = transfer_softmax(iv.point(np.zeros(2)))
    lo, hi = r.expand()
    assert np.allclose(lo, 0.5) and np.allclose(hi, 0.5)
    r = transfer_softmax(iv.uniform((1, 2), -210.0, 210.0))
    lo, hi = _hull(r)
    assert 0.0 <= lo and hi <= 1.0 and lo < 1e-100 and hi > 1 - 1e-12


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def test_softmax_corner_oracle_500():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(500):
        a = _random_pi(rng, (3,), finest=True, scale=3.0)
        lo, hi = transfer_softmax(a).expand()
        corners = np.array([_softmax(np.array(c)) for c in itertools.product(*zip(a.lo, a.hi))])
        worst = max(worst, rel_err(lo, corners.min(0)), rel_err(hi, corners.max(0)))
        for _ in range(3):
            v = _softmax(_sample_in(rng, a))
            assert np.all(v >= lo - 1e-12) and np.all(v <= hi + 1e-12)
    assert worst <= 1e-9


# ---------------------------------------------------------------- conv

CONV = {"kernel_shape": [2, 2]}


def test_conv_points_exact():
    rng = np.random.default_rng(7)
    x, k = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 2, 2))
    lo, hi = transfer_conv(iv.point(x), iv.point(k), CONV).expand()
    ref = eval_node("Conv", [x, k], CONV)[0]
    assert rel_err(lo, ref) < 1e-12 and rel_err(hi, ref) < 1e-12


def test_conv_coarsest_ones_kernel():
    r = transfer_conv(iv.uniform((1, 1, 3, 3), 0.0, 1.0), iv.point(np.ones((1, 1, 2, 2))), CONV)
    assert _hull(r) == (0.0, 4.0)


def test_conv_sampling_soundness():
    rng = np.random.default_rng(8)
    attrs = {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1], "strides": [2, 1]}
    for _ in range(20):
        a = _random_pi(rng, (1, 1, 5, 5))
        w = _random_pi(rng, (2, 1, 3, 3))
        bias = _random_pi(rng, (2,))
        r = transfer_conv(a, w, attrs, bias)
        for _ in range(20):
            v = eval_node("Conv", [_sample_in(rng, a), _sample_in(rng, w), _sample_in(rng, bias)], attrs)[0]
            assert iv.contains(r, v, tol=1e-9)


# ---------------------------------------------------------------- loop


def _loop_graph(trip_range=None, body_op="Add"):
    body = GB("body")
    body.input("it", [])
    body.input("c", [])
    body.input("z", [1])
    body.const("k", [1.0] if body_op == "Add" else [2.0])
    body.op("z2", body_op, ["z", "k"], [1])
    body.op("c2", "Identity", ["c"], [])
    bdoc = body.doc(inputs=["it", "c", "z"], outputs=["c2", "z2"])
    b = GB()
    if trip_range is None:
        b.const("trip", 3.0, shape=[])
    else:
        b.input("trip", [])
    b.const("cond", 1.0, shape=[])
    b.input("z0", [1])
    b.op("loop", "Loop", ["trip", "cond", "z0"], [1], body=bdoc)
    return b.build()


def test_loop_fixed_trip():
    g = _loop_graph()
    st = analyze(g, ValidRanges(ranges={"z0": [0.0, 0.0]}))
    assert _hull(st.output("loop")) == (3.0, 3.0)


def test_loop_point_trip_from_input():
    g = _loop_graph(trip_range=True, body_op="Mul")
    st = analyze(g, ValidRanges(ranges={"trip": [2.0, 2.0], "z0": [1.0, 2.0]}))
    assert _hull(st.output("loop")) == (4.0, 8.0)


def test_loop_interval_trip_joins_exits():
    g = _loop_graph(trip_range=True, body_op="Mul")
    st = analyze(g, ValidRanges(ranges={"trip": [1.0, 3.0], "z0": [1.0, 1.0]}))
    assert _hull(st.output("loop")) == (2.0, 8.0)


def test_loop_undecidable_exceeds_budget():
    g = _loop_graph(trip_range=True)
    with pytest.raises(LoopBudgetExceeded):
        analyze(g, ValidRanges(ranges={"trip": [0.0, 1e6], "z0": [0.0, 0.0]}))


# ---------------------------------------------------------------- elementwise


def test_elementwise_examples():
    assert rel_err(_hull(transfer_elementwise("Log", [iv.uniform((), 1.0, math.e ** 2)])), (0.0, 2.0)) < 1e-12
    assert _hull(transfer_elementwise("Sub", [iv.point(np.array(1.0)), iv.uniform((), 0.0, 1.0)])) == (0.0, 1.0)
    assert _hull(transfer_elementwise("Mul", [iv.uniform((), -1.0, 2.0), iv.uniform((), -3.0, 1.0)])) == (-6.0, 3.0)


def test_domain_error_only_when_whole_interval_invalid():
    with pytest.raises(DomainError):
        transfer_elementwise("Log", [iv.uniform((2,), -3.0, -1.0)])
    with pytest.raises(DomainError):
        transfer_elementwise("Sqrt", [iv.uniform((2,), -3.0, -1.0)])
    r = transfer_elementwise("Log", [iv.uniform((2,), -1.0, 1.0)])
    assert _hull(r)[1] == 0.0


@pytest.mark.parametrize("op", ["Exp", "Log", "Sqrt", "Neg", "Abs", "Sigmoid", "Tanh", "Relu", "Softplus",
                                "Reciprocal"])
def test_unary_sampling_soundness(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    for _ in range(30):
        lo = rng.uniform(0.1, 3.0) if op in ("Log", "Sqrt", "Reciprocal") else rng.uniform(-3, 3)
        a = iv.uniform((4,), lo, lo + rng.uniform(0, 2))
        r = transfer_elementwise(op, [a])
        with np.errstate(all="ignore"):
            v = eval_node(op, [_sample_in(rng, a)], {})[0]
        assert iv.contains(r, v, tol=1e-12)


@pytest.mark.parametrize("op", ["Add", "Sub", "Mul", "Div", "Pow", "Max", "Min"])
def test_binary_sampling_soundness(op):
    rng = np.random.default_rng(len(op))
    for _ in range(30):
        a = iv.uniform((3,), *sorted(rng.uniform(0.5 if op == "Pow" else -3, 3, 2)))
        if op == "Div":
            b = iv.uniform((3,), *sorted(rng.uniform(0.5, 3, 2)))
        elif op == "Pow":
            b = iv.point(np.array(float(rng.integers(-2, 4))))
        else:
            b = iv.uniform((3,), *sorted(rng.uniform(-3, 3, 2)))
        r = transfer_elementwise(op, [a, b])
        v = eval_node(op, [_sample_in(rng, a), _sample_in(rng, b)], {})[0]
        assert iv.contains(r, v, tol=1e-9)


# ---------------------------------------------------------------- gradients


def _exp_graph():
    b = GB()
    b.input("x", [1])
    b.op("y", "Exp", ["x"], [1])
    return b.build()


def test_endpoint_gradient_of_exp_upper_bound():
    t = 1.3
    st = analyze(_exp_graph(), ValidRanges(ranges={"x": [0.0, t]}), differentiable=True)
    gr = endpoint_gradients(st, ops.sum(st.output("y").u))
    assert rel_err(np.sum(gr[("x", "u")]), math.exp(t)) < 1e-12
    assert np.sum(np.abs(gr[("x", "l")])) == 0.0


def test_endpoint_gradients_need_differentiable_mode():
    st = analyze(_exp_graph(), ValidRanges(ranges={"x": [0.0, 1.0]}))
    with pytest.raises(NotDifferentiableMode):
        endpoint_gradients(st, 0.0)


def test_endpoint_gradient_matches_fd():
    g = _exp_graph()

    def ub(t):
        return float(np.sum(value_of(analyze(g, ValidRanges(ranges={"x": [0.0, t]})).output("y").u)))

    st = analyze(g, ValidRanges(ranges={"x": [0.0, 0.7]}), differentiable=True)
    gr = np.sum(endpoint_gradients(st, ops.sum(st.output("y").u))[("x", "u")])
    h = 1e-6
    assert rel_err(gr, (ub(0.7 + h) - ub(0.7 - h)) / (2 * h)) < 1e-4


def test_running_example_precondition_loss_fd():
    g, _, _ = running_example()
    g = as_f64(g)
    base = {"n1": [-1.0, 2.0], "n2": [-0.5, 0.7], "n4": [-0.3, 0.2], "n11": [0.0, 1.0]}
    req = FixRequest(["n9", "n10"], ["n1"])

    def loss_at(ranges):
        loss, _ = precond_loss(g, req, {}, ValidRanges(ranges=ranges), differentiable=False)
        return float(value_of(loss))

    loss, st = precond_loss(g, req, {}, ValidRanges(ranges=base), differentiable=True)
    grads = endpoint_gradients(st, ops.sum(loss))
    checked = 0
    for (nid, side), gv in grads.items():
        if nid == "n11":
            continue
        k = 0 if side == "l" else 1
        h = 1e-6
        up = {n: list(r) for n, r in base.items()}
        dn = {n: list(r) for n, r in base.items()}
        up[nid][k] += h
        dn[nid][k] -= h
        fd = (loss_at(up) - loss_at(dn)) / (2 * h)
        an = float(np.sum(gv))
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-3), (nid, side, an, fd)
        checked += 1
    assert checked == 6
