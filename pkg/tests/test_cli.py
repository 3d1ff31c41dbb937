import hashlib
import json
import subprocess
import sys

import pytest

from traceinsight.cli import main
from traceinsight.synthgen import generate, standard_spec

MODULES = ["anomaly", "capacity", "changepoint", "correlation", "idle", "leak"]


def run(ws, *argv):
    return main(["--workspace", str(ws), *argv])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def step_ws(tmp_path):
    ws = tmp_path / "ws"
    files, truth = generate(standard_spec("step", 11), tmp_path / "synth")
    assert run(ws, "import", str(files[0]), "--name", "step") == 0
    metric_args = [a for s in truth.metric_specs() for a in ("--metric", s)]
    assert run(ws, "experiment", "create", "exp1", *metric_args) == 0
    return ws


def test_modules_list(tmp_path, capsys):
    assert run(tmp_path, "modules", "list") == 0
    names = [line.split("\t")[0] for line in capsys.readouterr().out.splitlines()]
    assert names == MODULES


def test_modules_list_json(tmp_path, capsys):
    assert run(tmp_path, "modules", "list", "--json") == 0
    data = json.loads(capsys.readouterr().out)
    assert [d["name"] for d in data] == MODULES
    assert all(d["parameters"] for d in data)


def test_unknown_module(step_ws, capsys):
    assert run(step_ws, "analyze", "exp1", "--module", "nope") == 1
    assert "unknown module" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert run(tmp_path, "frobnicate") == 1
    assert run(tmp_path, "import", str(tmp_path / "missing.csv")) == 1
    assert run(tmp_path, "analyze", "ghost", "--module", "idle") == 1
    assert "error" in capsys.readouterr().err


def test_full_pipeline(step_ws, capsys):
    assert run(step_ws, "analyze", "exp1", "--module", "all") == 0
    for m in MODULES:
        assert (step_ws / "reports" / f"exp1.{m}.json").is_file()
    cp = json.loads((step_ws / "reports" / "exp1.changepoint.json").read_text())
    (voted,) = cp["findings"]["voted"]
    assert abs(voted["index"] - 100) <= 2
    assert run(step_ws, "report", "exp1", "--format", "md", "--plots") == 0
    md = (step_ws / "reports" / "exp1.report.md").read_text()
    assert "## changepoint:" in md and f"sample {voted['index']}" in md
    assert (step_ws / "reports" / "plots" / "exp1.changepoint.svg").is_file()
    assert run(step_ws, "report", "exp1", "--format", "json") == 0
    doc = json.loads((step_ws / "reports" / "exp1.report.json").read_text())
    assert [s["module"] for s in doc["sections"]] == MODULES


def test_reanalysis_byte_identical(step_ws):
    assert run(step_ws, "analyze", "exp1", "--module", "all") == 0
    first = {p.name: digest(p) for p in (step_ws / "reports").glob("*.json")}
    series_before = {p.name: digest(p) for p in (step_ws / "experiments" / "exp1").rglob("*") if p.is_file()}
    assert run(step_ws, "analyze", "exp1", "--module", "all") == 0
    assert {p.name: digest(p) for p in (step_ws / "reports").glob("*.json")} == first
    after = {p.name: digest(p) for p in (step_ws / "experiments" / "exp1").rglob("*") if p.is_file()}
    assert after == series_before


def test_params(step_ws):
    assert run(step_ws, "analyze", "exp1", "--module", "anomaly", "--param", "zscore_threshold=4.5",
               "--param", "detector=zscore") == 0
    env = json.loads((step_ws / "reports" / "exp1.anomaly.json").read_text())
    assert env["params_used"]["zscore_threshold"] == 4.5
    assert run(step_ws, "analyze", "exp1", "--module", "anomaly", "--param", "zscore_threshold=hi") == 1
    assert run(step_ws, "analyze", "exp1", "--module", "all", "--param", "max_cp=3") == 1
    assert run(step_ws, "analyze", "exp1", "--module", "all", "--param", "changepoint.max_cp=3") == 0


def test_config_defaults(step_ws):
    (step_ws / "config.json").write_text(json.dumps({"defaults": {"changepoint": {"max_cp": 1}}}))
    assert run(step_ws, "analyze", "exp1", "--module", "changepoint") == 0
    env = json.loads((step_ws / "reports" / "exp1.changepoint.json").read_text())
    assert env["params_used"]["max_cp"] == 1


def test_experiment_exists_and_list(step_ws, capsys):
    assert run(step_ws, "experiment", "create", "exp1", "--metric",
               "name=cpu,event=metrics,field=cpu,agg=last,dt=1000000000") == 1
    capsys.readouterr()
    assert run(step_ws, "experiment", "list") == 0
    assert capsys.readouterr().out.split() == ["exp1"]


def test_import_refuses_overwrite(step_ws, tmp_path):
    files, _ = generate(standard_spec("step", 12), tmp_path / "other")
    assert run(step_ws, "import", str(files[0]), "--name", "step") == 1
    assert run(step_ws, "import", str(files[0]), "--name", "step", "--force") == 0
    quality = json.loads((step_ws / "traces" / "step.quality.json").read_text())
    assert quality["dropped"] == 0


def test_report_without_analysis(step_ws, capsys):
    assert run(step_ws, "report", "exp1") == 1
    assert "analyze" in capsys.readouterr().err


def test_synth_command(tmp_path, capsys):
    scenario = tmp_path / "scn.json"
    scenario.write_text(json.dumps({"seed": 1, "duration": 50, "metrics": ["a"]}))
    assert run(tmp_path, "synth", str(scenario), "--out", str(tmp_path / "out")) == 0
    assert (tmp_path / "out" / "trace.jsonl").is_file()
    scenario.write_text(json.dumps({"seed": 1, "bogus": 2}))
    assert run(tmp_path, "synth", str(scenario)) == 1


def test_env_workspace(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TRACEINSIGHT_WORKSPACE", str(tmp_path))
    assert main(["experiment", "list"]) == 0


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "traceinsight", "--workspace", str(tmp_path), "modules", "list"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.count("\n") == 6
