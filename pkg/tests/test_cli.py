import json
import shutil
import subprocess
import sys

import pytest

from tracehunt.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def test_unknown_subcommand_exits_2(capsys):
    assert run("frobnicate") == 2
    assert "invalid choice" in capsys.readouterr().err


def test_missing_file_exits_1(tmp_path, capsys):
    code = run("hunt", "--trace", tmp_path / "nope.jsonl", "--kb", tmp_path, "--anchor", "{}", "--target", "{}",
               "--out", tmp_path / "r.json")
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "tracehunt.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ck, rb = root / "ck", root / "rb"
    assert run("synth", "--preset", "caseK", "--seed", 0, "--out", ck, "--calibration-events", 3000) == 0
    assert run("synth", "--preset", "robustness", "--seed", 0, "--out", rb) == 0
    tune = root / "tune"
    tune.mkdir()
    for d in sorted(p for p in (rb / "scenarios").iterdir() if p.name.endswith("r30"))[:6]:
        shutil.copytree(d, tune / d.name)
    for g in (rb / "kb").glob("fam0[0-5]*"):
        shutil.copy(g, ck / "kb" / g.name)
    prof = root / "profile.json"
    assert run("calibrate", "--benign", ck / "benign.jsonl", "--benign-hosts", ck / "benign_hosts.json",
               "--tune", tune, "--kb", ck / "kb", "--test-family", "webshell", "--grid-step", 0.5,
               "--loeo-edges", 200, "--out", prof) == 0
    return root, ck, prof


def _hunt(ck, prof, out, trace=None):
    s = ck / "scenarios" / "caseK"
    return run("hunt", "--trace", trace or s / "trace.jsonl", "--labels", s / "labels.json",
               "--aliases", s / "aliases.json", "--hosts", s / "hosts.json", "--profile", prof,
               "--kb", ck / "kb", "--anchor", f"@{s / 'anchor.json'}", "--target", f"@{s / 'target.json'}",
               "--out", out)


def test_case_k_pipeline(pipeline):
    root, ck, prof = pipeline
    res_path = root / "result.json"
    assert _hunt(ck, prof, res_path) == 0
    result = json.loads(res_path.read_text())
    assert result["status"] == "PATHS"
    assert len(result["inferred_layer"]) == 1
    s = ck / "scenarios" / "caseK"
    metrics_path = root / "metrics.json"
    assert run("evaluate", "--result", res_path, "--labels", s / "labels.json", "--truth", s / "truth.jsonl",
               "--aliases", s / "aliases.json", "--hosts", s / "hosts.json", "--out", metrics_path) == 0
    metrics = json.loads(metrics_path.read_text())
    assert metrics["phr"] == 0.0 and metrics["f1"] > 0


def test_hunt_replay_is_byte_identical(pipeline):
    root, ck, prof = pipeline
    a, b = root / "a.json", root / "b.json"
    assert _hunt(ck, prof, a) == 0 and _hunt(ck, prof, b) == 0
    assert a.read_bytes() == b.read_bytes()
    ta, tb = root / "a.txt", root / "b.txt"
    assert run("report", "--result", a, "--out-text", ta, "--out-dot", root / "a.dot", "--no-timestamps") == 0
    assert run("report", "--result", b, "--out-text", tb, "--no-timestamps") == 0
    assert ta.read_bytes() == tb.read_bytes()
    assert (root / "a.dot").read_text().startswith("digraph")


def test_severed_hunt_reports_insufficient_evidence(pipeline):
    root, ck, prof = pipeline
    empty = root / "empty.jsonl"
    empty.write_text("")
    out = root / "severed.json"
    assert _hunt(ck, prof, out, trace=empty) == 0
    assert json.loads(out.read_text())["status"] == "INSUFFICIENT_EVIDENCE"


def test_perturb_wiz(pipeline, capsys):
    root, ck, _ = pipeline
    s = ck / "scenarios" / "caseK"
    out = root / "wiped.jsonl"
    assert run("perturb", "--in", s / "truth.jsonl", "--labels", s / "labels.json", "--profile", "wiz",
               "--rate", 1.0, "--out", out, "--report", root / "supp.json") == 0
    assert "Microsoft-Windows-Security-Auditing" not in out.read_text()
    assert "kept" in capsys.readouterr().out


def test_evaluate_without_truth_is_usage_error(pipeline):
    root, ck, _ = pipeline
    s = ck / "scenarios" / "caseK"
    assert run("evaluate", "--result", root / "result.json", "--labels", s / "labels.json", "--out", root / "m.json") == 2
