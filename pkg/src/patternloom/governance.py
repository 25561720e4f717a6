"""Approval Gate, Blast Radius Control and the Observability Harness report.

Rules are small declarative predicates::

    {"id": "no-prod-delete", "all": [
        {"field": "tool", "op": "eq", "value": "delete"},
        {"field": "args.env", "op": "eq", "value": "prod"}]}

A bare ``{"field", "op", "value"}`` counts as a one-condition conjunction.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from patternloom.errors import MalformedTrace
from patternloom.kernel import (
    Context,
    EventKind,
    Route,
    Step,
    StepOutcome,
    Trace,
    TraceEvent,
    WorkflowNode,
)
from patternloom.model_backend import ModelBackend


class Reversibility(str, Enum):
    REVERSIBLE = "Reversible"
    IRREVERSIBLE = "Irreversible"


class Impact(str, Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"


class Verdict(str, Enum):
    DENY = "Deny"
    ALLOW = "Allow"
    HUMAN = "Human"


@dataclass(frozen=True)
class ActionRequest:
    tool: str
    reversibility: Reversibility
    impact: Impact
    args: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ActionRequest:
        return cls(str(d["tool"]), Reversibility(d["reversibility"]), Impact(d["impact"]), dict(d.get("args", {})))

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool": self.tool,
            "reversibility": self.reversibility.value,
            "impact": self.impact.value,
            "args": dict(self.args),
        }

    def field_value(self, path: str) -> Any:
        if path == "tool":
            return self.tool
        if path == "reversibility":
            return self.reversibility.value
        if path == "impact":
            return self.impact.value
        head, _, rest = path.partition(".")
        if head != "args":
            raise KeyError(path)
        value: Any = self.args
        for part in rest.split("."):
            if not isinstance(value, Mapping) or part not in value:
                return None
            value = value[part]
        return value


def _order(a: Any, b: Any, cmp: Callable[[Any, Any], bool]) -> bool:
    try:
        return a is not None and cmp(a, b)
    except TypeError:
        return False


_OPS: dict[str, Callable[[Any, Any], bool]] = {
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "in": lambda a, b: a in b,
    "not_in": lambda a, b: a not in b,
    "contains": lambda a, b: a is not None and b in a,
    "startswith": lambda a, b: isinstance(a, str) and a.startswith(b),
    "gt": lambda a, b: _order(a, b, lambda x, y: x > y),
    "ge": lambda a, b: _order(a, b, lambda x, y: x >= y),
    "lt": lambda a, b: _order(a, b, lambda x, y: x < y),
    "le": lambda a, b: _order(a, b, lambda x, y: x <= y),
}


@dataclass(frozen=True)
class Condition:
    field: str
    op: str
    value: Any

    def __post_init__(self) -> None:
        if self.op not in _OPS:
            raise ValueError(f"unknown operator {self.op!r}")

    def __call__(self, action: ActionRequest) -> bool:
        return _OPS[self.op](action.field_value(self.field), self.value)


@dataclass(frozen=True)
class Rule:
    id: str
    conditions: tuple[Condition, ...]

    def __call__(self, action: ActionRequest) -> bool:
        return all(c(action) for c in self.conditions)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Rule:
        conds = d.get("all")
        if conds is None:
            conds = [{"field": d["field"], "op": d.get("op", "eq"), "value": d["value"]}]
        return cls(str(d["id"]), tuple(Condition(c["field"], c.get("op", "eq"), c["value"]) for c in conds))

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "all": [{"field": c.field, "op": c.op, "value": c.value} for c in self.conditions]}


@dataclass(frozen=True)
class RuleSet:
    deny: tuple[Rule, ...] = ()
    allow: tuple[Rule, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RuleSet:
        return cls(
            tuple(Rule.from_dict(r) for r in d.get("deny", [])),
            tuple(Rule.from_dict(r) for r in d.get("allow", [])),
        )

    @classmethod
    def load(cls, path: str | Path) -> RuleSet:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        return {"deny": [r.to_dict() for r in self.deny], "allow": [r.to_dict() for r in self.allow]}


@dataclass(frozen=True)
class GateDecision:
    verdict: Verdict
    matched_rule: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"verdict": self.verdict.value, "matched_rule": self.matched_rule}


def evaluate_gate(action: ActionRequest, rules: RuleSet) -> GateDecision:
    """Deny rules first, then allow rules; whatever is left goes to a human."""
    for rule in rules.deny:
        if rule(action):
            return GateDecision(Verdict.DENY, rule.id)
    for rule in rules.allow:
        if rule(action):
            return GateDecision(Verdict.ALLOW, rule.id)
    return GateDecision(Verdict.HUMAN)


Approver = Callable[[ActionRequest], bool]


class ScriptedApprover:
    """Answers human-gate prompts from a fixed list, then a default."""

    def __init__(self, answers: Iterable[bool] = (), default: bool = False) -> None:
        self._answers = list(answers)
        self.default = default
        self.asked: list[ActionRequest] = []

    def __call__(self, action: ActionRequest) -> bool:
        self.asked.append(action)
        return self._answers.pop(0) if self._answers else self.default


def prompt_approver(ask: Callable[[str], str] = input) -> Approver:
    def approve(action: ActionRequest) -> bool:
        reply = ask(f"approve {action.tool} ({action.reversibility.value}, {action.impact.value})? [y/N] ")
        return reply.strip().lower() in {"y", "yes"}

    return approve


def gate_step(action: ActionRequest, rules: RuleSet, approver: Approver | None = None, name: str = "approval-gate") -> Step:
    """Classifier step labelled ``Allow`` or ``Blocked``; emits a GateDecision event."""

    def handler(ctx: Context, backend: ModelBackend) -> StepOutcome:
        decision = evaluate_gate(action, rules)
        approved: bool | None = None
        if decision.verdict is Verdict.HUMAN:
            approved = bool(approver(action)) if approver is not None else False
        permitted = decision.verdict is Verdict.ALLOW or approved is True
        payload = {
            "gate": "approval",
            "tool": action.tool,
            **decision.to_dict(),
            "approved": approved,
            "blocked": not permitted,
        }
        label = "Allow" if permitted else "Blocked"
        return StepOutcome(output=label, label=label, events=[(EventKind.GATE_DECISION, payload)])

    return Step(name, "C7", handler)


def approval_gate(action: ActionRequest, rules: RuleSet, then: WorkflowNode, approver: Approver | None = None) -> Route:
    def blocked(ctx: Context, backend: ModelBackend) -> StepOutcome:
        return StepOutcome(output=f"blocked {action.tool}", writes={"blocked": action.tool})

    return Route(gate_step(action, rules, approver), {"Allow": then}, Step("blocked", "C7", blocked), name="approval-gate")


# -- containment ----------------------------------------------------------------


@dataclass(frozen=True)
class ContainmentLevel:
    """One containment layer. ``None`` means the layer leaves that resource open.

    ``path_allowlist`` entries are path prefixes; ``network_allowlist`` entries
    are exact hosts; ``rate_limit`` is calls per accounting window;
    ``budget_cap`` is cumulative dollars.
    """

    name: str
    path_allowlist: tuple[str, ...] | None = None
    network_allowlist: frozenset[str] | None = None
    rate_limit: int | None = None
    budget_cap: float | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ContainmentLevel:
        paths = d.get("path_allowlist")
        hosts = d.get("network_allowlist")
        return cls(
            str(d["name"]),
            None if paths is None else tuple(paths),
            None if hosts is None else frozenset(hosts),
            d.get("rate_limit"),
            d.get("budget_cap"),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "path_allowlist": None if self.path_allowlist is None else list(self.path_allowlist),
            "network_allowlist": None if self.network_allowlist is None else sorted(self.network_allowlist),
            "rate_limit": self.rate_limit,
            "budget_cap": self.budget_cap,
        }


@dataclass
class Usage:
    calls: int = 0
    spend: float = 0.0


@dataclass(frozen=True)
class ContainmentDecision:
    permitted: bool
    level: str | None = None
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"permitted": self.permitted, "level": self.level, "reason": self.reason}


@dataclass(frozen=True)
class ContainmentHierarchy:
    levels: tuple[ContainmentLevel, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ValueError("a containment hierarchy needs at least one level")

    @classmethod
    def from_list(cls, items: Sequence[Mapping[str, Any]]) -> ContainmentHierarchy:
        return cls(tuple(ContainmentLevel.from_dict(x) for x in items))

    @classmethod
    def load(cls, path: str | Path) -> ContainmentHierarchy:
        data = json.loads(Path(path).read_text())
        return cls.from_list(data["levels"] if isinstance(data, dict) else data)

    def to_list(self) -> list[dict[str, Any]]:
        return [lv.to_dict() for lv in self.levels]

    def effective(self) -> ContainmentLevel:
        return effective_level(self)


def _path_ok(path: str, allowed: tuple[str, ...]) -> bool:
    return any(path == p or path.startswith(p.rstrip("/") + "/") or p == "/" for p in allowed)


def _level_block(level: ContainmentLevel, action: ActionRequest, usage: Usage) -> str | None:
    path = action.args.get("path")
    if path is not None and level.path_allowlist is not None and not _path_ok(str(path), level.path_allowlist):
        return f"path {path!r} outside allowlist"
    host = action.args.get("host")
    if host is not None and level.network_allowlist is not None and host not in level.network_allowlist:
        return f"host {host!r} not allowed"
    if level.rate_limit is not None and usage.calls + 1 > level.rate_limit:
        return f"rate limit {level.rate_limit} reached"
    cost = float(action.args.get("cost", 0.0))
    if level.budget_cap is not None and usage.spend + cost > level.budget_cap + 1e-12:
        return f"spend {usage.spend + cost:g} exceeds budget cap {level.budget_cap:g}"
    return None


def check_containment(action: ActionRequest, hierarchy: ContainmentHierarchy, usage: Usage | None = None) -> ContainmentDecision:
    """Permit only if every level permits; otherwise name the outermost blocker."""
    usage = usage or Usage()
    for level in hierarchy.levels:
        reason = _level_block(level, action, usage)
        if reason is not None:
            return ContainmentDecision(False, level.name, reason)
    return ContainmentDecision(True)


def _intersect_prefixes(a: tuple[str, ...], b: tuple[str, ...]) -> tuple[str, ...]:
    out = set()
    for x in a:
        for y in b:
            if _path_ok(y, (x,)):
                out.add(y)
            elif _path_ok(x, (y,)):
                out.add(x)
    return tuple(sorted(out))


def _fold_min(values: Iterable[Any]) -> Any:
    present = [v for v in values if v is not None]
    return min(present) if present else None


def effective_level(hierarchy: ContainmentHierarchy) -> ContainmentLevel:
    """The single level whose every limit is the tightest across the hierarchy."""
    paths: tuple[str, ...] | None = None
    hosts: frozenset[str] | None = None
    for lv in hierarchy.levels:
        if lv.path_allowlist is not None:
            paths = lv.path_allowlist if paths is None else _intersect_prefixes(paths, lv.path_allowlist)
        if lv.network_allowlist is not None:
            hosts = lv.network_allowlist if hosts is None else hosts & lv.network_allowlist
    return ContainmentLevel(
        "effective",
        paths,
        hosts,
        _fold_min(lv.rate_limit for lv in hierarchy.levels),
        _fold_min(lv.budget_cap for lv in hierarchy.levels),
    )


class ContainmentGuard:
    """Step-boundary enforcement: the single writer of the usage counters."""

    def __init__(self, hierarchy: ContainmentHierarchy, usage: Usage | None = None) -> None:
        self.hierarchy = hierarchy
        self.usage = usage or Usage()

    def admit(self, action: ActionRequest) -> ContainmentDecision:
        decision = check_containment(action, self.hierarchy, self.usage)
        if decision.permitted:
            self.usage.calls += 1
            self.usage.spend += float(action.args.get("cost", 0.0))
        return decision

    def wrap(self, step: Step, action: ActionRequest) -> Step:
        """A step that runs ``step`` only when ``action`` clears containment."""

        def handler(ctx: Context, backend: ModelBackend) -> StepOutcome:
            decision = self.admit(action)
            event = {"gate": "containment", "tool": action.tool, **decision.to_dict(), "blocked": not decision.permitted}
            if not decision.permitted:
                return StepOutcome(output=f"contained: {decision.reason}", events=[(EventKind.GATE_DECISION, event)])
            inner = step.handler(ctx, backend)
            inner.events = [(EventKind.GATE_DECISION, event), *inner.events]
            return inner

        return Step(step.name, step.function, handler, cost_cap=step.cost_cap, rate=step.rate)


# -- observability harness ------------------------------------------------------


@dataclass
class RunReport:
    steps: list[dict[str, Any]] = field(default_factory=list)
    per_node: dict[str, dict[str, Any]] = field(default_factory=dict)
    total_tokens: int = 0
    total_dollars: float = 0.0
    gate_decisions: dict[str, int] = field(default_factory=dict)
    blocked_actions: int = 0
    containment_blocks: int = 0
    iterations: dict[str, int] = field(default_factory=dict)
    errors: list[dict[str, Any]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.steps or self.gate_decisions or self.iterations or self.errors)

    def to_dict(self) -> dict[str, Any]:
        return {
            "steps": self.steps,
            "per_node": self.per_node,
            "total_tokens": self.total_tokens,
            "total_dollars": self.total_dollars,
            "gate_decisions": self.gate_decisions,
            "blocked_actions": self.blocked_actions,
            "containment_blocks": self.containment_blocks,
            "iterations": self.iterations,
            "errors": self.errors,
        }


def _check_balance(events: Sequence[TraceEvent]) -> None:
    stack: list[tuple[str, ...]] = []
    last = -1
    for e in events:
        if e.seq <= last:
            raise MalformedTrace(f"sequence not increasing at {e.seq}")
        last = e.seq
        if e.kind is EventKind.NODE_ENTER:
            if stack and e.path[: len(stack[-1])] != stack[-1]:
                raise MalformedTrace(f"node {'/'.join(e.path)} entered outside its parent")
            stack.append(e.path)
        elif e.kind is EventKind.NODE_EXIT:
            if not stack or stack[-1] != e.path:
                raise MalformedTrace(f"unmatched exit for {'/'.join(e.path)}")
            stack.pop()
    if stack:
        raise MalformedTrace(f"{len(stack)} node(s) never exited")


def harness_report(trace: Trace | Sequence[TraceEvent]) -> RunReport:
    """Aggregate a trace into a run report. Pure function of the events."""
    events = list(trace)
    _check_balance(events)
    report = RunReport()
    for e in events:
        key = "/".join(e.path)
        if e.kind is EventKind.STEP_RUN:
            p = e.payload
            row = {
                "path": key,
                "step": p["step"],
                "function": p.get("function"),
                "tokens_in": p["tokens_in"],
                "tokens_out": p["tokens_out"],
                "dollars": p["dollars"],
            }
            report.steps.append(row)
            node = report.per_node.setdefault(key, {"runs": 0, "tokens": 0, "dollars": 0.0})
            node["runs"] += 1
            node["tokens"] += p["tokens_in"] + p["tokens_out"]
            node["dollars"] += p["dollars"]
        elif e.kind is EventKind.BUDGET_CHARGE:
            report.total_tokens += e.payload["tokens_in"] + e.payload["tokens_out"]
            report.total_dollars += e.payload["dollars"]
        elif e.kind is EventKind.GATE_DECISION:
            p = e.payload
            label = p.get("verdict") or ("Permit" if p.get("permitted") else "Block")
            tag = f"{p.get('gate', 'approval')}:{label}"
            report.gate_decisions[tag] = report.gate_decisions.get(tag, 0) + 1
            if p.get("blocked", p.get("verdict") == Verdict.DENY.value):
                report.blocked_actions += 1
                if p.get("gate") == "containment":
                    report.containment_blocks += 1
        elif e.kind is EventKind.ITERATION_START:
            report.iterations[key] = max(report.iterations.get(key, 0), e.payload["iteration"])
        elif e.kind is EventKind.ERROR:
            report.errors.append({"path": key, **e.payload})
    return report
