"""Command-line front end: detect, confirm, fix, run and bench.

Exit codes: 0 success, 10 defects found (detect), 11 some defect not
confirmed, 12 some fix not found, 2 configuration or graph errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .analysis import ValidRanges, analyze
from .detect import detect
from .errors import NumguardError
from .fix import FixRequest, abstraction_optimization, apply_fix, resolve_fix_locations, verify_fix
from .graph import Graph, load_graph, serialize_graph
from .testgen import gen_training_example, gen_unit_test, initial_weights

SCHEMA = "numguard-report/1"
EXIT_OK, EXIT_DEFECTS, EXIT_UNCONFIRMED, EXIT_UNFIXED, EXIT_ERROR = 0, 10, 11, 12, 2

log = logging.getLogger("numguard")


@dataclass
class RunConfig:
    graph: str | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    mode: str = "tight"
    fix_at: str = "both"
    budget_seconds: float = 1800.0
    out: str | None = None
    restarts: int = 100
    grad_iters: int = 100
    system_iters: int = 300
    gamma: float = 1.0
    seeds: list | None = None

    def __post_init__(self):
        if self.mode not in ("tight", "fast"):
            raise ValueError(f"mode must be tight or fast, not {self.mode!r}")
        for name in ("budget_seconds", "system_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.restarts < 0 or self.grad_iters < 0:
            raise ValueError("search budgets must be nonnegative")

    @property
    def valid_ranges(self) -> ValidRanges:
        return ValidRanges.from_config(self.config)

    def run_seeds(self) -> list:
        if self.seeds is not None:
            return list(self.seeds)
        return list(self.config.get("seeds", [self.seed]))


class Timings:
    def __init__(self):
        self.entries: dict = {}

    def add(self, key: str, seconds: float):
        self.entries[key] = round(float(seconds), 6)


def _header(command: str, g: Graph, cfg: RunConfig) -> dict:
    return {
        "schema": SCHEMA,
        "tool_version": __version__,
        "command": command,
        "graph": g.name,
        "seed": cfg.seed,
        "mode": cfg.mode,
    }


# ---------------------------------------------------------------- commands


def _detect_phase(g: Graph, cfg: RunConfig, timings: Timings):
    t0 = time.perf_counter()
    reports = detect(g, analyze(g, cfg.valid_ranges, mode=cfg.mode))
    timings.add("detect", time.perf_counter() - t0)
    return reports


def cmd_detect(cfg: RunConfig, g: Graph | None = None, timings: Timings | None = None):
    g = g or load_graph(cfg.graph)
    timings = timings or Timings()
    reports = _detect_phase(g, cfg, timings)
    rep = _header("detect", g, cfg)
    rep["defects"] = [r.to_json() for r in reports]
    return rep, (EXIT_DEFECTS if reports else EXIT_OK), timings


def _confirm_one(g, vr, cfg, nid, seed, timings):
    t0 = time.perf_counter()
    unit = gen_unit_test(g, nid, vr, seed, cfg.restarts, cfg.grad_iters)
    timings.add(f"unit:{nid}:{seed}", time.perf_counter() - t0)
    entry = {"defect_node": nid, "seed": seed}
    if not unit:
        entry["unit"] = {"defect_node": nid, "verified": False, "reason": unit.reason}
        entry["system"] = {"defect_node": nid, "verified": False, "reason": "no unit test"}
        return entry
    entry["unit"] = {**unit.to_json(), "gamma": cfg.gamma}
    if g.loss_node is None:
        entry["system"] = {"defect_node": nid, "verified": False, "reason": "graph has no loss node"}
        return entry
    t1 = time.perf_counter()
    w0 = initial_weights(g, vr, seed)
    st = gen_training_example(g, unit, w0, cfg.gamma, seed, vr=vr, max_iters=cfg.system_iters,
                              budget_seconds=cfg.budget_seconds)
    timings.add(f"system:{nid}:{seed}", time.perf_counter() - t1)
    if st:
        entry["system"] = st.to_json()
    else:
        entry["system"] = {"defect_node": nid, "verified": False, "reason": st.reason}
    return entry


def cmd_confirm(cfg: RunConfig, g: Graph | None = None, timings: Timings | None = None):
    g = g or load_graph(cfg.graph)
    timings = timings or Timings()
    vr = cfg.valid_ranges
    reports = _detect_phase(g, cfg, timings)
    tests = [_confirm_one(g, vr, cfg, r.node, seed, timings) for r in reports for seed in cfg.run_seeds()]
    rep = _header("confirm", g, cfg)
    rep["defects"] = [r.to_json() for r in reports]
    rep["tests"] = tests
    ok = all(t["unit"]["verified"] and t["system"]["verified"] for t in tests)
    return rep, (EXIT_OK if ok else EXIT_UNCONFIRMED), timings


def _fix_phase(g, cfg, defects, timings):
    vr = cfg.valid_ranges
    req = FixRequest(defects, resolve_fix_locations(g, cfg.fix_at, defects))
    t0 = time.perf_counter()
    fix = abstraction_optimization(g, req, vr, cfg.mode, budget_seconds=cfg.budget_seconds)
    timings.add("fix", time.perf_counter() - t0)
    if not fix:
        return {"preset": cfg.fix_at, "nodes": [], "verified": False, "reason": fix.reason}, None
    fixed = apply_fix(g, fix)
    t1 = time.perf_counter()
    fix.verified = verify_fix(fixed, vr, 1000, cfg.seed, targets=defects, mode=cfg.mode)
    timings.add("verify_fix", time.perf_counter() - t1)
    return {"preset": cfg.fix_at, **fix.to_json()}, fixed


def cmd_fix(cfg: RunConfig, g: Graph | None = None, timings: Timings | None = None):
    g = g or load_graph(cfg.graph)
    timings = timings or Timings()
    reports = _detect_phase(g, cfg, timings)
    rep = _header("fix", g, cfg)
    rep["defects"] = [r.to_json() for r in reports]
    if not reports:
        rep["fix"] = {"preset": cfg.fix_at, "nodes": [], "verified": True, "reason": "nothing to fix"}
        return rep, EXIT_OK, timings
    rep["fix"], fixed = _fix_phase(g, cfg, [r.node for r in reports], timings)
    if fixed is not None:
        rep["fixed_graph"] = serialize_graph(fixed)
    return rep, (EXIT_OK if rep["fix"]["verified"] else EXIT_UNFIXED), timings


def cmd_run(cfg: RunConfig, g: Graph | None = None, timings: Timings | None = None):
    g = g or load_graph(cfg.graph)
    timings = timings or Timings()
    rep, code, _ = cmd_confirm(cfg, g, timings)
    rep["command"] = "run"
    fx, _, _ = cmd_fix(cfg, g, timings)
    rep["fix"] = fx["fix"]
    if "fixed_graph" in fx:
        rep["fixed_graph"] = fx["fixed_graph"]
    if not rep["fix"]["verified"]:
        code = EXIT_UNFIXED
    return rep, code, timings


def corpus_cases(corpus_dir) -> list[tuple[Path, Path | None]]:
    d = Path(corpus_dir)
    out = []
    for p in sorted(d.glob("*.json")):
        if p.name.endswith(".config.json") or p.name.endswith(".fixed.json"):
            continue
        c = p.with_name(p.name[: -len(".json")] + ".config.json")
        out.append((p, c if c.exists() else None))
    return out


def cmd_bench(corpus_dir, cfg: RunConfig):
    """Per-case detection recall, confirmation and fix results over a corpus."""
    timings = Timings()
    rows = []
    totals = {"expected": 0, "detected": 0, "runs": 0, "unit": 0, "system": 0, "fix_cases": 0, "fixed": 0}
    for gpath, cpath in corpus_cases(corpus_dir):
        g = load_graph(gpath)
        conf = json.loads(cpath.read_text()) if cpath else {}
        log.info("bench case %s", g.name)
        case_cfg = RunConfig(str(gpath), conf, cfg.seed, cfg.mode, "both", cfg.budget_seconds, None,
                             cfg.restarts, cfg.grad_iters, cfg.system_iters, cfg.gamma, cfg.seeds)
        case_t = Timings()
        rep, _, _ = cmd_confirm(case_cfg, g, case_t)
        found = [d["node"] for d in rep["defects"]]
        expected = list(conf.get("expected_defects", found))
        tests = rep["tests"]
        row = {
            "case": g.name,
            "expected": expected,
            "detected": found,
            "recall": (len(set(expected) & set(found)) / len(expected)) if expected else 1.0,
            "runs": len(tests),
            "unit_C": sum(t["unit"]["verified"] for t in tests),
            "system_C": sum(t["system"]["verified"] for t in tests),
        }
        if found:
            fixrep, fixed = _fix_phase(g, case_cfg, found, case_t)
            row["fix"] = {k: fixrep[k] for k in ("verified", "iterations", "span") if k in fixrep}
            totals["fix_cases"] += 1
            totals["fixed"] += int(fixrep["verified"])
        else:
            row["fix"] = {"verified": True}
        for k, v in case_t.entries.items():
            timings.add(f"{g.name}:{k}", v)
        unit_t = [v for k, v in case_t.entries.items() if k.startswith("unit:")]
        sys_t = [v for k, v in case_t.entries.items() if k.startswith("system:")]
        timings.add(f"{g.name}:unit_T_mean", sum(unit_t) / len(unit_t) if unit_t else 0.0)
        timings.add(f"{g.name}:system_T_mean", sum(sys_t) / len(sys_t) if sys_t else 0.0)
        totals["expected"] += len(expected)
        totals["detected"] += len(set(expected) & set(found))
        totals["runs"] += row["runs"]
        totals["unit"] += row["unit_C"]
        totals["system"] += row["system_C"]
        rows.append(row)
    summary = {
        "cases": len(rows),
        "detect_recall": totals["detected"] / totals["expected"] if totals["expected"] else 1.0,
        "unit_rate": totals["unit"] / totals["runs"] if totals["runs"] else 1.0,
        "confirm_rate": totals["system"] / totals["runs"] if totals["runs"] else 1.0,
        "fix_rate": totals["fixed"] / totals["fix_cases"] if totals["fix_cases"] else 1.0,
    }
    rep = {"schema": SCHEMA, "tool_version": __version__, "command": "bench", "seed": cfg.seed,
           "mode": cfg.mode, "rows": rows, "summary": summary}
    code = EXIT_OK
    if summary["confirm_rate"] < 1.0:
        code = EXIT_UNCONFIRMED
    if summary["fix_rate"] < 1.0:
        code = EXIT_UNFIXED
    return rep, code, timings


def render_table(rep: dict) -> str:
    """Plain-text table of a bench report."""
    head = f"{'case':<24}{'defects':>8}{'recall':>8}{'unit C':>8}{'sys C':>8}{'fix':>6}{'iters':>7}"
    lines = [head, "-" * len(head)]
    for r in rep["rows"]:
        fx = r["fix"]
        lines.append(
            f"{r['case']:<24}{len(r['expected']):>8}{r['recall']:>8.2f}"
            f"{r['unit_C']:>5}/{r['runs']:<2}{r['system_C']:>5}/{r['runs']:<2}"
            f"{'yes' if fx.get('verified') else 'no':>6}{fx.get('iterations', '-'):>7}"
        )
    s = rep["summary"]
    lines.append("-" * len(head))
    lines.append(
        f"recall {s['detect_recall']:.2f}  unit {s['unit_rate']:.2f}  "
        f"confirm {s['confirm_rate']:.2f}  fix {s['fix_rate']:.2f}"
    )
    return "\n".join(lines)


# ---------------------------------------------------------------- entry point


def dump_report(rep: dict) -> str:
    return json.dumps(rep, sort_keys=True, indent=2) + "\n"


def _write_outputs(out_dir, rep, timings: Timings, name: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = dict(rep)
    fixed = rep.pop("fixed_graph", None)
    if fixed is not None:
        (out / f"{name}.fixed.json").write_text(fixed)
        rep["fixed_graph_file"] = f"{name}.fixed.json"
    (out / "report.json").write_text(dump_report(rep))
    (out / "timings.json").write_text(json.dumps(timings.entries, sort_keys=True, indent=2) + "\n")
    return rep


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="numguard", description="Find, confirm and fix numerical defects in graphs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("detect", "confirm", "fix", "run", "bench"):
        sp = sub.add_parser(name)
        if name == "bench":
            sp.add_argument("corpus", nargs="?", default=None, help="directory of graph/config pairs")
        else:
            sp.add_argument("--graph", required=True)
        sp.add_argument("--config", default=None, help="JSON file with valid ranges and budgets")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--seeds", type=str, default=None, help="comma-separated run seeds")
        sp.add_argument("--mode", choices=("tight", "fast"), default="tight")
        sp.add_argument("--fix-at", default="both", help="weights|inputs|both|defect|list:<ids>")
        sp.add_argument("--budget-seconds", type=float, default=1800.0)
        sp.add_argument("--restarts", type=int, default=None)
        sp.add_argument("--grad-iters", type=int, default=None)
        sp.add_argument("--out", default=None, help="directory for report.json, timings.json and artifacts")
    return p


def _config_from_args(args) -> RunConfig:
    conf = json.loads(Path(args.config).read_text()) if args.config else {}
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    return RunConfig(
        graph=getattr(args, "graph", None),
        config=conf,
        seed=args.seed,
        mode=args.mode,
        fix_at=args.fix_at,
        budget_seconds=args.budget_seconds,
        out=args.out,
        restarts=args.restarts if args.restarts is not None else int(conf.get("restarts", 100)),
        grad_iters=args.grad_iters if args.grad_iters is not None else int(conf.get("grad_iters", 100)),
        system_iters=int(conf.get("system_iters", 300)),
        gamma=float(conf.get("gamma", 1.0)),
        seeds=seeds,
    )


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NUMGUARD_LOG", "WARNING").upper(), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "bench":
            from importlib import resources

            corpus = args.corpus or str(resources.files("numguard") / "corpus")
            rep, code, timings = cmd_bench(corpus, cfg)
            name = "bench"
        else:
            fn = {"detect": cmd_detect, "confirm": cmd_confirm, "fix": cmd_fix, "run": cmd_run}[args.command]
            rep, code, timings = fn(cfg)
            name = Path(cfg.graph).name.removesuffix(".json")
    except (NumguardError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"numguard: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if cfg.out:
        rep = _write_outputs(cfg.out, rep, timings, name)
    if args.command == "bench":
        print(render_table(rep))
        if not cfg.out:
            sys.stdout.write(dump_report(rep))
    else:
        sys.stdout.write(dump_report(rep))
    return code


if __name__ == "__main__":
    sys.exit(main())
