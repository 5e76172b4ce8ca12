import json
import shutil
import subprocess
import sys

import pytest

from helpers import CORPUS
from numguard.cli import EXIT_DEFECTS, EXIT_ERROR, EXIT_OK, EXIT_UNCONFIRMED, EXIT_UNFIXED, main

RE = str(CORPUS / "running_example.json")
RE_CFG = str(CORPUS / "running_example.config.json")


def _run(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr().out


def test_detect_exit_codes(capsys):
    code, out = _run(["detect", "--graph", RE, "--config", RE_CFG], capsys)
    assert code == EXIT_DEFECTS
    rep = json.loads(out)
    assert sorted(d["node"] for d in rep["defects"]) == ["n10", "n9"]
    clean = str(CORPUS / "gemm_clean.json")
    assert _run(["detect", "--graph", clean], capsys)[0] == EXIT_OK


def test_malformed_graph(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"nodes\": [")
    assert main(["detect", "--graph", str(bad)]) == EXIT_ERROR
    assert "error" in capsys.readouterr().err
    assert main(["detect", "--graph", str(tmp_path / "missing.json")]) == EXIT_ERROR


def test_confirm_with_no_budget(capsys):
    code, _ = _run(["confirm", "--graph", RE, "--config", RE_CFG, "--restarts", "0", "--grad-iters", "0"], capsys)
    assert code == EXIT_UNCONFIRMED


def test_confirm_succeeds(capsys):
    code, out = _run(["confirm", "--graph", RE, "--config", RE_CFG], capsys)
    assert code == EXIT_OK
    rep = json.loads(out)
    assert all(t["system"]["verified"] for t in rep["tests"])


def test_fixed_graph_is_clean(tmp_path, capsys):
    code, _ = _run(["fix", "--graph", RE, "--config", RE_CFG, "--fix-at", "weights", "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["fix"]["verified"]
    fixed = tmp_path / rep["fixed_graph_file"]
    assert _run(["detect", "--graph", str(fixed), "--config", RE_CFG], capsys)[0] == EXIT_OK
    assert json.loads((tmp_path / "timings.json").read_text())["fix"] >= 0


def test_reports_byte_identical(tmp_path, capsys):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        main(["run", "--graph", RE, "--config", RE_CFG, "--seed", "3", "--out", str(d)])
        outs.append((d / "report.json").read_bytes())
    capsys.readouterr()
    assert outs[0] == outs[1]


def test_bench_empty_corpus(tmp_path, capsys):
    code, out = _run(["bench", str(tmp_path)], capsys)
    assert code == EXIT_OK and "recall 1.00" in out


def test_bench_failing_case(tmp_path, capsys):
    shutil.copy(RE, tmp_path)
    shutil.copy(RE_CFG, tmp_path)
    code, out = _run(["bench", str(tmp_path), "--restarts", "0", "--grad-iters", "0"], capsys)
    assert code in (EXIT_UNCONFIRMED, EXIT_UNFIXED)
    assert "running_example" in out


def test_bad_option_values(capsys):
    assert main(["detect", "--graph", RE, "--restarts", "-1"]) == EXIT_ERROR
    with pytest.raises(SystemExit):
        main(["detect", "--graph", RE, "--mode", "exact"])
    capsys.readouterr()


def test_console_module_entry():
    res = subprocess.run([sys.executable, "-m", "numguard", "detect", "--graph", RE, "--config", RE_CFG],
                         capture_output=True, text=True)
    assert res.returncode == EXIT_DEFECTS
    assert json.loads(res.stdout)["command"] == "detect"
