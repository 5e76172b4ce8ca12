"""Acceptance suite: one PASS/FAIL line per criterion, printed uncaptured."""

import time

import numpy as np
import pytest

import test_analysis as ta
import test_interval as ti
import test_tensor as tt
from helpers import CORPUS, corpus_names, load_case, running_example
from numguard.analysis import analyze
from numguard.cli import RunConfig, cmd_bench, dump_report, main
from numguard.detect import DEFECT_OPS, detect
from numguard.fix import Fix, FixRequest, abstraction_optimization, apply_fix, resolve_fix_locations, verify_fix
from numguard.graph import execute
from numguard.testgen import SystemTest, UnitTest, gen_training_example, gen_unit_test, initial_weights, one_step_sgd

LOGS = ["n9", "n10"]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return emit


def test_criterion_1_running_example(report):
    g, _, vr = running_example()
    t0 = time.perf_counter()
    st = analyze(g, vr)
    flagged = sorted(r.node for r in detect(g, st))
    dt = time.perf_counter() - t0
    n5 = tuple(st.input("n5", 1).hull())
    n6 = tuple(st.input("n6", 1).hull())
    n8 = tuple(st.output("n8").hull())
    ok = (n5 == (-200.0, 200.0) and n6 == (-210.0, 210.0) and 0.0 <= n8[0] and n8[1] <= 1.0
          and flagged == ["n10", "n9"] and dt < 1.0)
    report(1, ok, f"n5 in {n5}, n6 in {n6}, n8 in {n8}, flagged {flagged}, {dt:.3f}s")


def test_criterion_2_unit_tests(report):
    g, _, vr = running_example()
    ok_runs, times = 0, []
    for seed in range(10):
        t0 = time.perf_counter()
        res = [gen_unit_test(g, d, vr, seed=seed, restarts=100, grad_iters=100) for d in LOGS]
        times.append(time.perf_counter() - t0)
        ok_runs += all(isinstance(r, UnitTest) for r in res)
    mean = float(np.mean(times))
    report(2, ok_runs == 10 and mean < 5.0, f"C={ok_runs}/10, mean {mean:.3f}s per run")


def _log_nonfinite(g, st: SystemTest) -> bool:
    w1 = one_step_sgd(g, st.x_train, st.w_0, 1.0)
    _, rep = execute(g, st.x_infer, w1)
    return any(n in rep.flagged for n in LOGS)


def test_criterion_3_system_tests(report):
    g, _, vr = running_example()
    verified = 0
    for seed in range(10):
        d = LOGS[seed % 2]
        ut = gen_unit_test(g, d, vr, seed=seed)
        if not isinstance(ut, UnitTest):
            continue
        st = gen_training_example(g, ut, initial_weights(g, vr, seed), gamma=1.0, seed=seed, vr=vr)
        verified += isinstance(st, SystemTest) and st.verified and _log_nonfinite(g, st)
    report(3, verified >= 9, f"{verified}/10 verified system tests")


def test_criterion_4_fix_presets(report):
    g, _, vr = running_example()
    parts, ok = [], True
    for preset in ("both", "weights", "inputs"):
        res = abstraction_optimization(g, FixRequest(LOGS, resolve_fix_locations(g, preset, LOGS)), vr)
        if isinstance(res, Fix):
            good = verify_fix(apply_fix(g, res), vr, samples=1000, seed=0)
            if preset == "both":
                good = good and res.iterations <= 60
            parts.append(f"{preset}: {res.iterations} iters, verified={good}")
        else:
            good = False
            parts.append(f"{preset}: failed (best loss {res.best_objective:.3g})")
        ok = ok and good
    report(4, ok, "; ".join(parts))


def _coverage():
    ops, dyn_reshape = set(), False
    for name in corpus_names():
        g, _, _ = load_case(name)
        for n in g.nodes:
            if n.kind != "Operator":
                continue
            ops.add(n.op)
            if n.op == "Reshape":
                src = g.node(g.in_edges(n.id)[1].src)
                dyn_reshape |= src.kind != "Constant"
    return ops, dyn_reshape


def test_criterion_5_corpus(report):
    ops, dyn = _coverage()
    missing = sorted(set(DEFECT_OPS) - ops)
    rep, _, _ = cmd_bench(CORPUS, RunConfig())
    s = rep["summary"]
    ok = (rep["summary"]["cases"] >= 10 and not missing and {"Loop", "Conv"} <= ops and dyn
          and s["detect_recall"] == 1.0 and s["confirm_rate"] >= 0.8 and s["fix_rate"] == 1.0)
    report(5, ok, f"{s['cases']} graphs, missing ops {missing}, dynamic reshape {dyn}, recall "
                  f"{s['detect_recall']:.2f}, confirm {s['confirm_rate']:.2f}, fix {s['fix_rate']:.2f}")


def _suite(fn, *args):
    try:
        fn(*args)
        return True
    except AssertionError:
        return False


def test_criterion_6_properties(report):
    checks = {
        "soundness": all(_suite(ta.test_monte_carlo_soundness, n) for n in corpus_names()),
        "tightness": _suite(ta.test_matmul_tight_is_exact_on_500_instances),
        "fast_contains_tight": _suite(ta.test_matmul_fast_contains_tight_and_samples),
        "softmax_corners": _suite(ta.test_softmax_corner_oracle_500),
        "gradients": all(_suite(tt.test_backward_matches_finite_differences, k) for k in sorted(tt.CASES))
        and _suite(tt.test_fd_cases_cover_every_differentiable_operator)
        and _suite(ta.test_running_example_precondition_loss_fd),
        "split_laws": _suite(ti.test_union_laws) and _suite(ti.test_refine_preserves_membership),
    }
    report(6, all(checks.values()), ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))


def test_criterion_7_determinism(report, tmp_path, capsys):
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        main(["run", "--graph", str(CORPUS / "running_example.json"),
              "--config", str(CORPUS / "running_example.config.json"), "--seed", "7", "--out", str(out)])
        blobs.append((out / "report.json").read_bytes())
    rep1, _, _ = cmd_bench(CORPUS, RunConfig(seed=1))
    rep2, _, _ = cmd_bench(CORPUS, RunConfig(seed=1))
    capsys.readouterr()
    ok = blobs[0] == blobs[1] and dump_report(rep1) == dump_report(rep2)
    report(7, ok, f"run reports identical={blobs[0] == blobs[1]}, bench identical={dump_report(rep1) == dump_report(rep2)}")
