"""End-to-end CLI tests against golden outputs under a fixed seed.

Regenerate with ``PATTERNLOOM_REGEN_GOLDEN=1 pytest tests/test_cli.py``.
"""

from __future__ import annotations

import io
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from patternloom.advisor import DomainConstraints
from patternloom.cli import dispatch, main
from patternloom.governance import ActionRequest, ContainmentDecision, GateDecision, Verdict
from patternloom.kernel import Trace

HERE = Path(__file__).parent
DATA = HERE / "data"
GOLDEN = HERE / "golden"
REGEN = bool(os.environ.get("PATTERNLOOM_REGEN_GOLDEN"))

CASES = {
    "catalog_list": ["catalog", "list"],
    "catalog_list_t5": ["catalog", "list", "--topology", "T5"],
    "catalog_show": ["catalog", "show", "C5", "T1"],
    "catalog_show_empty": ["catalog", "show", "C7", "T1"],
    "catalog_report": ["catalog", "report"],
    "ingest": ["ingest", "docs", "--max-tokens", "200"],
    "run": ["--model-script", "model.json", "run", "workflow.json", "--task", "refund my order"],
    "run_default_branch": ["--model-script", "model.json", "run", "workflow.json", "--task", "opening hours"],
    "run_seed_1": ["--seed", "1", "--model-script", "noisy_model.json", "run", "workflow.json", "--task", "x"],
    "run_seed_2": ["--seed", "2", "--model-script", "noisy_model.json", "run", "workflow.json", "--task", "x"],
    "route_system1": ["route", "--query", "What are your store hours?"],
    "route_forced": ["route", "--query", "What are your store hours?", "--force", "Extended"],
    "cost_report": ["cost-report", "--mix", "s1=50000,s2=0,ext=50000"],
    "saga_ok": ["saga-run", "deploy_report"],
    "saga_fail": ["saga-run", "deploy_report", "--fail-at", "d-publish"],
    "reflect": ["reflect"],
    "reflect_one_pass": ["reflect", "--task", "one-pass"],
    "heal": ["heal"],
    "heal_never": ["heal", "--fixture", "never-passes"],
    "fanout": ["fanout"],
    "fanout_concat": ["fanout", "--strategy", "concat", "--n", "4"],
    "fanout_synthesis": ["fanout", "--strategy", "synthesis"],
    "gate_deny": ["gate", "eval", "deny_action.json"],
    "gate_allow": ["gate", "eval", "allow_action.json"],
    "gate_human": ["gate", "eval", "human_action.json"],
    "gate_custom_rules": ["gate", "eval", "human_action.json", "--rules", "rules.json"],
    "containment_host": ["containment", "check", "host_action.json"],
    "containment_caps": ["containment", "check", "spend_action.json", "--hierarchy", "caps.json"],
    "containment_ok": ["containment", "check", "allow_action.json"],
    "advise": ["advise", "--time", "4h", "--volume", "single", "--authority", "advisory", "--domain", "lending"],
    "advise_check": ["advise", "check-fixtures"],
}


@pytest.fixture(autouse=True)
def in_data_dir(monkeypatch):
    monkeypatch.chdir(DATA)


def check_golden(name: str, text: str) -> None:
    path = GOLDEN / f"{name}.txt"
    if REGEN:
        path.write_text(text + "\n")
    assert text + "\n" == path.read_text()


@pytest.mark.parametrize("name", sorted(CASES))
def test_golden_text(name):
    result = dispatch(CASES[name])
    assert result.exit_code == 0, result.output
    check_golden(name, result.output)


@pytest.mark.parametrize("name", sorted(CASES))
def test_json_output_parses(name):
    result = dispatch(["--json", *CASES[name]])
    assert result.exit_code == 0
    data = json.loads(result.output)
    # canonical form: dumping the parsed payload reproduces the output
    assert json.dumps(data, indent=2, sort_keys=True) == result.output


def test_flags_after_subcommand():
    assert dispatch(["reflect", "--json"]).output == dispatch(["--json", "reflect"]).output


def test_seed_changes_perturbed_output_only():
    assert dispatch(CASES["run_seed_1"]).output != dispatch(CASES["run_seed_2"]).output
    assert dispatch(CASES["run_seed_1"]).output == dispatch(CASES["run_seed_1"]).output


def test_report_from_run_trace(tmp_path):
    trace = tmp_path / "trace.jsonl"
    ran = dispatch(["--model-script", "model.json", "run", "workflow.json", "--task", "refund my order", "--trace", str(trace)])
    assert ran.exit_code == 0
    result = dispatch(["report", str(trace)])
    assert result.exit_code == 0
    check_golden("report", result.output)
    data = json.loads(dispatch(["--json", "report", str(trace)]).output)
    assert data["total_tokens"] == json.loads(
        dispatch(["--json", "--model-script", "model.json", "run", "workflow.json", "--task", "refund my order"]).output
    )["total_tokens"]
    assert len(Trace.from_jsonl(trace.read_text())) == json.loads(dispatch(["--json", *CASES["run"]]).output)["events"]


def test_report_empty_trace(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert dispatch(["report", str(empty)]).output == "empty trace"


def test_report_malformed_trace_is_domain_error(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"seq": 0, "kind": "NodeEnter", "path": ["a"], "payload": {}}) + "\n")
    result = dispatch(["report", str(bad)])
    assert result.exit_code == 1 and result.output.startswith("error:")


def test_ingest_writes_store(tmp_path):
    out = tmp_path / "store.json"
    result = dispatch(["--json", "ingest", "docs", "--out", str(out)])
    payload = json.loads(result.output)
    assert payload["documents"] == 2 and out.exists()
    assert len(json.loads(out.read_text())["chunks"]) == payload["chunks"]


def test_json_roundtrips_through_schemas():
    gate = json.loads(dispatch(["--json", *CASES["gate_deny"]]).output)
    assert GateDecision(Verdict(gate["verdict"]), gate["matched_rule"]).to_dict() == gate
    cont = json.loads(dispatch(["--json", *CASES["containment_caps"]]).output)
    assert ContainmentDecision(**cont).to_dict() == cont
    advice = json.loads(dispatch(["--json", *CASES["advise"]]).output)
    assert advice["primary_topology"] == "Orchestrate" and advice["pattern_count"] == 7
    action = json.loads((DATA / "deny_action.json").read_text())
    assert ActionRequest.from_dict(action).to_dict() == action
    fixtures = json.loads(dispatch(["--json", *CASES["advise_check"]]).output)
    assert fixtures["passed"] == fixtures["total"] == 4
    assert DomainConstraints.from_dict({"time_budget": 60, "volume": "Single", "authority": "AdvisoryOnly"})


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["catalog"],
        ["route"],
        ["advise", "--time", "4h"],
        ["advise", "explain"],
        ["fanout", "--strategy", "median"],
        ["route", "--query", "x", "--force", "System9"],
    ],
)
def test_usage_errors_exit_2(argv):
    assert dispatch(argv).exit_code == 2


@pytest.mark.parametrize(
    "argv",
    [
        ["catalog", "show", "C9", "T1"],
        ["saga-run", "poisoned"],
        ["saga-run", "missing.json"],
        ["run", "missing.json"],
        ["reflect", "--task", "nope"],
        ["cost-report", "--mix", "s1=-4"],
        ["advise", "--time", "never", "--volume", "single", "--authority", "advisory"],
        ["gate", "eval", "rules.json"],
    ],
)
def test_domain_errors_exit_1(argv):
    result = dispatch(argv)
    assert result.exit_code == 1 and result.output.startswith("error:")


def test_budget_exceeded_is_domain_error():
    result = dispatch(["--model-script", "model.json", "run", "workflow.json", "--task", "refund", "--budget-tokens", "3"])
    assert result.exit_code == 1


def test_main_streams():
    out = io.StringIO()
    assert main(["catalog", "report"], out=out) == 0
    assert "fill ratio: 28/42" in out.getvalue()


def test_module_entry_point_no_args_prints_usage():
    proc = subprocess.run([sys.executable, "-m", "patternloom"], capture_output=True, text=True, cwd=DATA)
    assert proc.returncode == 2 and "usage:" in proc.stderr and proc.stdout == ""


def test_module_entry_point_check_fixtures():
    proc = subprocess.run([sys.executable, "-m", "patternloom", "advise", "check-fixtures"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip().endswith("4/4 fixtures pass")


def test_catalog_env_override(tmp_path, monkeypatch):
    from importlib.resources import files

    data = json.loads(files("patternloom").joinpath("data/catalog.json").read_text())
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps(data))
    monkeypatch.setenv("PATTERNLOOM_CATALOG", str(path))
    assert "28/42" in dispatch(["catalog", "report"]).output
    path.write_text("{not json")
    assert dispatch(["catalog", "report"]).exit_code == 1
