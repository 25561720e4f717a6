from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patternloom.errors import MalformedTrace
from patternloom.governance import (
    ActionRequest,
    Condition,
    ContainmentGuard,
    ContainmentHierarchy,
    ContainmentLevel,
    Impact,
    Reversibility,
    RuleSet,
    ScriptedApprover,
    Usage,
    Verdict,
    approval_gate,
    check_containment,
    evaluate_gate,
    harness_report,
    prompt_approver,
)
from patternloom.kernel import Chain, Context, EventKind, Trace, TraceEvent, TokenLedger, execute, static_step
from patternloom.model_backend import ScriptedModel
from patternloom.reflection_collaboration import fan_out_gather
from gov_gen import FIXTURE_ALLOW, FIXTURE_DENY, random_action, random_hierarchy, random_level, rule
from workflow_gen import fuzz_model, random_context, random_workflow

ALL_CLASSES = [(r, i) for r in Reversibility for i in Impact]


def act(rev: str = "Reversible", imp: str = "Low", tool: str = "write", **args) -> ActionRequest:
    return ActionRequest(tool, Reversibility(rev), Impact(imp), args)


# -- approval gate ----------------------------------------------------------------


def test_deny_precedence_exhaustive():
    cases = 0
    rules = [("deny", r) for r in FIXTURE_DENY] + [("allow", r) for r in FIXTURE_ALLOW]
    for mask in range(2 ** len(rules)):
        active = [rules[i] for i in range(len(rules)) if mask >> i & 1]
        rs = RuleSet(tuple(r for k, r in active if k == "deny"), tuple(r for k, r in active if k == "allow"))
        for rev, imp in ALL_CLASSES:
            a = ActionRequest("tool", rev, imp)
            decision = evaluate_gate(a, rs)
            deny_hits = [r.id for k, r in active if k == "deny" and r(a)]
            allow_hits = [r.id for k, r in active if k == "allow" and r(a)]
            if deny_hits:
                assert decision.verdict is Verdict.DENY and decision.matched_rule == deny_hits[0]
            elif allow_hits:
                assert decision.verdict is Verdict.ALLOW and decision.matched_rule == allow_hits[0]
            else:
                assert decision.verdict is Verdict.HUMAN and decision.matched_rule is None
            cases += 1
    assert cases == 2**6 * 6


def test_deny_beats_allow():
    rs = RuleSet((rule("d", impact="High"),), (rule("a", impact="High"),))
    assert evaluate_gate(act(imp="High"), rs).verdict is Verdict.DENY


def test_empty_rules_is_human():
    assert evaluate_gate(act(), RuleSet((), ())).verdict is Verdict.HUMAN


def test_single_allow():
    rs = RuleSet((), (FIXTURE_ALLOW[0],))
    d = evaluate_gate(act("Reversible", "Low"), rs)
    assert (d.verdict, d.matched_rule) == (Verdict.ALLOW, "a-rev-low")


@pytest.mark.parametrize(
    "op,value,arg,expected",
    [
        ("startswith", "/etc", "/etc/passwd", True),
        ("contains", "prod", "eu-prod-1", True),
        ("in", ["a", "b"], "b", True),
        ("not_in", ["a"], "b", True),
        ("gt", 10, 11, True),
        ("le", 10, 11, False),
        ("gt", 10, None, False),
        ("ne", "x", "y", True),
    ],
)
def test_operators(op, value, arg, expected):
    assert Condition("args.v", op, value)(act(v=arg)) is expected


def test_unknown_operator_and_field():
    with pytest.raises(ValueError):
        Condition("tool", "matches", "x")
    with pytest.raises(KeyError):
        Condition("owner", "eq", "x")(act())


def test_missing_nested_arg_is_none():
    assert act(env={"x": 1}).field_value("args.env.y") is None


def test_ruleset_roundtrip_and_bare_rule():
    data = {
        "deny": [{"id": "n", "field": "tool", "op": "eq", "value": "rm"}],
        "allow": [{"id": "y", "all": [{"field": "impact", "op": "eq", "value": "Low"}]}],
    }
    rs = RuleSet.from_dict(data)
    assert RuleSet.from_dict(json.loads(json.dumps(rs.to_dict()))) == rs
    assert evaluate_gate(act(tool="rm"), rs).verdict is Verdict.DENY


def test_action_roundtrip():
    a = act("Irreversible", "Medium", path="/tmp/x")
    assert ActionRequest.from_dict(a.to_dict()) == a


def gate_run(action: ActionRequest, rs: RuleSet, approver=None):
    wf = approval_gate(action, rs, static_step("do", "C4", "done"), approver)
    return execute(wf, Context("t"))


def test_gate_routes_allowed_action():
    ctx, trace = gate_run(act(), RuleSet((), (FIXTURE_ALLOW[0],)))
    assert ctx.last_output == "done"
    assert harness_report(trace).gate_decisions == {"approval:Allow": 1}


def test_gate_blocks_denied_action():
    ctx, trace = gate_run(act(imp="High"), RuleSet((FIXTURE_DENY[1],), ()))
    assert ctx.get("blocked") == "write"
    report = harness_report(trace)
    assert report.blocked_actions == 1 and report.gate_decisions == {"approval:Deny": 1}


@pytest.mark.parametrize("answer,output", [(True, "done"), (False, "blocked write")])
def test_human_verdict_uses_approver(answer, output):
    ctx, trace = gate_run(act(imp="Medium"), RuleSet((), ()), ScriptedApprover([answer]))
    assert ctx.last_output == output
    [gd] = trace.of_kind(EventKind.GATE_DECISION)
    assert gd.payload["verdict"] == "Human" and gd.payload["approved"] is answer


def test_prompt_approver():
    assert prompt_approver(lambda q: "y")(act()) is True
    assert prompt_approver(lambda q: "no")(act()) is False


# -- containment ------------------------------------------------------------------


def caps(*values: float) -> ContainmentHierarchy:
    return ContainmentHierarchy(tuple(ContainmentLevel(f"l{i}", budget_cap=v) for i, v in enumerate(values)))


def test_budget_caps_min():
    h = ContainmentHierarchy.from_list([{"name": n, "budget_cap": c} for n, c in [("a", 100), ("b", 50), ("c", 75)]])
    assert h.effective().budget_cap == 50
    d = check_containment(act(cost=60.0), h)
    assert not d.permitted and d.level == "b"
    assert check_containment(act(cost=50.0), h).permitted


def test_open_level_permits_everything():
    h = ContainmentHierarchy((ContainmentLevel("open"),))
    assert check_containment(act(path="/anything", host="x", cost=1e9), h, Usage(10**6, 1e9)).permitted


def test_outermost_blocker_is_named():
    h = ContainmentHierarchy(
        (
            ContainmentLevel("outer", path_allowlist=("/workspace",)),
            ContainmentLevel("inner", path_allowlist=("/srv",)),
        )
    )
    d = check_containment(act(path="/srv/data"), h)
    assert (d.permitted, d.level) == (False, "outer")


def test_path_prefix_is_component_wise():
    h = ContainmentHierarchy((ContainmentLevel("fs", path_allowlist=("/workspace",)),))
    assert check_containment(act(path="/workspace/a"), h).permitted
    assert not check_containment(act(path="/workspace-evil/a"), h).permitted


def test_rate_limit_and_guard_accounting():
    guard = ContainmentGuard(ContainmentHierarchy((ContainmentLevel("rl", rate_limit=2, budget_cap=10.0),)))
    outcomes = [guard.admit(act(cost=4.0)).permitted for _ in range(3)]
    assert outcomes == [True, True, False]
    assert (guard.usage.calls, guard.usage.spend) == (2, 8.0)


def test_guard_wrap_records_block():
    h = ContainmentHierarchy((ContainmentLevel("net", network_allowlist=frozenset({"api.internal"})),))
    guard = ContainmentGuard(h)
    wf = Chain(
        [
            guard.wrap(static_step("ok", "C4", "fetched"), act(host="api.internal")),
            guard.wrap(static_step("bad", "C4", "leaked"), act(host="evil.example")),
        ]
    )
    ctx, trace = execute(wf, Context("t"))
    report = harness_report(trace)
    assert ctx.last_output.startswith("contained:")
    assert report.containment_blocks == 1 and report.gate_decisions == {"containment:Permit": 1, "containment:Block": 1}


def test_hierarchy_needs_a_level():
    with pytest.raises(ValueError):
        ContainmentHierarchy(())


def test_hierarchy_roundtrip(tmp_path):
    h = ContainmentHierarchy.from_list(
        [{"name": "a", "path_allowlist": ["/w"], "network_allowlist": ["h"], "rate_limit": 3, "budget_cap": 2.0}]
    )
    p = tmp_path / "h.json"
    p.write_text(json.dumps({"levels": h.to_list()}))
    assert ContainmentHierarchy.load(p) == h


def test_effective_cap_is_coordinate_wise_min_1000_hierarchies():
    rnd = random.Random(1234)
    for _ in range(1000):
        h = random_hierarchy(rnd)
        eff = h.effective()
        rates = [lv.rate_limit for lv in h.levels if lv.rate_limit is not None]
        budgets = [lv.budget_cap for lv in h.levels if lv.budget_cap is not None]
        assert eff.rate_limit == (min(rates) if rates else None)
        assert eff.budget_cap == (min(budgets) if budgets else None)
        host_sets = [lv.network_allowlist for lv in h.levels if lv.network_allowlist is not None]
        assert eff.network_allowlist == (frozenset.intersection(*host_sets) if host_sets else None)
        # same permitted spend and call sequence as the single effective level
        nested, single = ContainmentGuard(h), ContainmentGuard(ContainmentHierarchy((eff,)))
        for _ in range(10):
            a = random_action(rnd)
            assert nested.admit(a).permitted == single.admit(a).permitted
        assert nested.usage == single.usage


def test_monotonicity_random():
    rnd = random.Random(99)
    for _ in range(500):
        h = random_hierarchy(rnd)
        extra = random_level(rnd, "extra")
        usage = Usage(rnd.randint(0, 8), float(rnd.randint(0, 40)))
        a = random_action(rnd)
        before = check_containment(a, h, usage).permitted
        for pos in range(len(h.levels) + 1):
            levels = list(h.levels)
            levels.insert(pos, extra)
            after = check_containment(a, ContainmentHierarchy(tuple(levels)), usage).permitted
            assert not (not before and after)


# -- observability harness ----------------------------------------------------------


def test_empty_trace_empty_report():
    r = harness_report(Trace())
    assert r.empty and r.total_tokens == 0 and r.to_dict()["steps"] == []


def test_one_deny_counts_one_block():
    trace = Trace(
        [
            TraceEvent(0, EventKind.NODE_ENTER, ("g",), {}),
            TraceEvent(1, EventKind.GATE_DECISION, ("g",), {"gate": "approval", "verdict": "Deny"}),
            TraceEvent(2, EventKind.NODE_EXIT, ("g",), {}),
        ]
    )
    assert harness_report(trace).blocked_actions == 1


@pytest.mark.parametrize(
    "events",
    [
        [(0, EventKind.NODE_ENTER, ("a",))],
        [(0, EventKind.NODE_EXIT, ("a",))],
        [(0, EventKind.NODE_ENTER, ("a",)), (1, EventKind.NODE_ENTER, ("b",)), (2, EventKind.NODE_EXIT, ("b",))],
        [(0, EventKind.NODE_ENTER, ("a",)), (0, EventKind.NODE_EXIT, ("a",))],
        [(0, EventKind.NODE_ENTER, ("a",)), (1, EventKind.NODE_ENTER, ("a", "b")), (2, EventKind.NODE_EXIT, ("a",))],
    ],
)
def test_malformed_traces(events):
    with pytest.raises(MalformedTrace):
        harness_report([TraceEvent(s, k, p, {}) for s, k, p in events])


def test_report_is_pure_function_of_trace():
    model = fuzz_model(3)
    ledger = TokenLedger()
    _, trace = execute(random_workflow(3), random_context(3), ledger, model)
    again = Trace.from_jsonl(trace.to_jsonl())
    assert harness_report(trace).to_dict() == harness_report(again).to_dict()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_report_conservation_on_fuzzed_workflows(seed):
    ledger = TokenLedger()
    _, trace = execute(random_workflow(seed), random_context(seed), ledger, fuzz_model(seed))
    report = harness_report(trace)
    assert report.total_tokens == ledger.total_tokens
    assert abs(report.total_dollars - ledger.total_dollars) < 1e-9
    assert sum(r["tokens_in"] + r["tokens_out"] for r in report.steps) == ledger.total_tokens


def test_report_conservation_fan_out():
    g = fan_out_gather(["q0", "q1", "q2"], ScriptedModel())
    r = harness_report(g.trace)
    assert r.total_tokens == g.ledger.total_tokens == g.worker_tokens + g.aggregation_tokens
    assert {k for k in r.per_node if k.endswith("worker-0")}


def test_preset_governance_file():
    from importlib.resources import files

    data = json.loads(files("patternloom").joinpath("data/governance.json").read_text())
    rs = RuleSet.from_dict(data["rules"])
    h = ContainmentHierarchy.from_list(data["hierarchy"])
    assert evaluate_gate(act(path="/etc/hosts"), rs).verdict is Verdict.DENY
    assert evaluate_gate(act(), rs).verdict is Verdict.ALLOW
    assert check_containment(act(path="/tmp/x"), h).level == "filesystem"
    names = [lv.name for lv in h.levels]
    assert names == ["process-sandbox", "filesystem", "network", "rate-limit", "budget"]
