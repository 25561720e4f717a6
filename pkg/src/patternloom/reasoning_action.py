"""Complexity-Based Routing and Plan-and-Execute with saga compensation."""

from __future__ import annotations

import json
import re
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any

from patternloom.errors import CyclicPlan, PatternloomError
from patternloom.kernel import Context, Route, Step, StepOutcome, TokenLedger, Trace, execute
from patternloom.model_backend import ModelBackend, tokenize

# -- tiers ------------------------------------------------------------------

EXTENDED_DOLLARS = Decimal("0.19")
EXTENDED_TOKENS = 64_000
# System 2 price is the Extended per-token rate applied to its 8K budget
SYSTEM2_DOLLARS = EXTENDED_DOLLARS / EXTENDED_TOKENS * 8_000


class TierId(str, Enum):
    SYSTEM1 = "System1"
    SYSTEM2 = "System2"
    EXTENDED = "Extended"


@dataclass(frozen=True)
class ReasoningTier:
    id: TierId
    thinking_tokens: int
    dollars_per_query: Decimal


TIERS: dict[TierId, ReasoningTier] = {
    TierId.SYSTEM1: ReasoningTier(TierId.SYSTEM1, 500, Decimal("0.0015")),
    TierId.SYSTEM2: ReasoningTier(TierId.SYSTEM2, 8_000, SYSTEM2_DOLLARS),
    TierId.EXTENDED: ReasoningTier(TierId.EXTENDED, EXTENDED_TOKENS, EXTENDED_DOLLARS),
}

CUE_WORDS = frozenset({"then", "diagnose", "compare", "why"})
_NUMBER = re.compile(r"\d+(?:[.,]\d+)*")
_WORD = re.compile(r"[a-z]+")


def complexity_features(query: str) -> dict[str, int]:
    lowered = query.lower()
    return {
        "tokens": tokenize(query),
        "question_marks": query.count("?"),
        "numbers": len(_NUMBER.findall(query)),
        "cue_words": sum(1 for w in _WORD.findall(lowered) if w in CUE_WORDS),
    }


def complexity_score(query: str) -> int:
    """Feature score: one point per cue word, per extra question mark, per
    50 tokens, plus up to two points for numeric entities."""
    f = complexity_features(query)
    return f["cue_words"] + max(0, f["question_marks"] - 1) + min(f["numbers"], 2) + f["tokens"] // 50


def classify_complexity(query: str) -> ReasoningTier:
    score = complexity_score(query)
    if score < 2:
        return TIERS[TierId.SYSTEM1]
    if score <= 4:
        return TIERS[TierId.SYSTEM2]
    return TIERS[TierId.EXTENDED]


# -- routed answering ---------------------------------------------------------


@dataclass
class RouteResult:
    answer: str
    tier: ReasoningTier
    cost: Decimal
    trace: Trace
    ledger: TokenLedger


def _answer_step(tier: ReasoningTier) -> Step:
    def handler(ctx: Context, backend: ModelBackend) -> StepOutcome:
        done = backend.complete(f"[{tier.id.value}] {ctx.task}", tier.thinking_tokens)
        return StepOutcome(
            output=done.text,
            writes={"answer": done.text},
            tokens_in=done.tokens_in,
            tokens_out=done.tokens_out,
            dollars=float(tier.dollars_per_query),
        )

    return Step(f"answer-{tier.id.value}", "C3", handler)


def routing_workflow(force: TierId | None = None) -> Route:
    def classify(ctx: Context, backend: ModelBackend) -> StepOutcome:
        tier = TIERS[force] if force is not None else classify_complexity(ctx.task)
        return StepOutcome(output=tier.id.value, label=tier.id.value, writes={"tier": tier.id.value})

    branches = {t.value: _answer_step(TIERS[t]) for t in TierId}
    fallback = _answer_step(TIERS[TierId.SYSTEM2])
    fallback = Step("answer-default", fallback.function, fallback.handler)
    return Route(Step("classify-complexity", "C3", classify), branches, fallback, name="complexity-routing")


def route_and_answer(
    query: str,
    model: ModelBackend,
    ledger: TokenLedger | None = None,
    *,
    force_tier: TierId | str | None = None,
) -> RouteResult:
    """Classify, dispatch to the tier's answer step and bill its per-query price.

    ``force_tier`` bypasses the classifier, which is how misrouting is simulated.
    """
    ledger = ledger if ledger is not None else TokenLedger()
    force = TierId(force_tier) if force_tier is not None else None
    start = len(ledger.entries)
    ctx, trace = execute(routing_workflow(force), Context(query), ledger, model)
    tier = TIERS[TierId(ctx.get("tier"))]
    cost = sum((Decimal(str(e.dollars)) for e in ledger.entries[start:]), Decimal(0))
    return RouteResult(ctx.get("answer"), tier, cost, trace, ledger)


# -- cost report --------------------------------------------------------------

_CENT = Decimal("0.01")


@dataclass(frozen=True)
class CostReport:
    mix: dict[TierId, int]

    @property
    def queries(self) -> int:
        return sum(self.mix.values())

    @property
    def total(self) -> Decimal:
        return sum((TIERS[t].dollars_per_query * n for t, n in self.mix.items()), Decimal(0))

    @property
    def all_system1(self) -> Decimal:
        return TIERS[TierId.SYSTEM1].dollars_per_query * self.queries

    @property
    def all_extended(self) -> Decimal:
        return TIERS[TierId.EXTENDED].dollars_per_query * self.queries

    @property
    def savings_vs_extended(self) -> Decimal:
        return self.all_extended - self.total

    @property
    def premium_vs_system1(self) -> Decimal:
        return self.total - self.all_system1

    @property
    def baseline_spread(self) -> Decimal:
        return self.all_extended - self.all_system1

    def __add__(self, other: CostReport) -> CostReport:
        return daily_cost_report({t: self.mix.get(t, 0) + other.mix.get(t, 0) for t in TierId})

    def to_dict(self) -> dict[str, Any]:
        def money(x: Decimal) -> str:
            return str(x.quantize(_CENT))

        return {
            "mix": {t.value: self.mix.get(t, 0) for t in TierId},
            "queries": self.queries,
            "total": money(self.total),
            "all_system1": money(self.all_system1),
            "all_extended": money(self.all_extended),
            "savings_vs_extended": money(self.savings_vs_extended),
            "premium_vs_system1": money(self.premium_vs_system1),
            "baseline_spread": money(self.baseline_spread),
        }


def daily_cost_report(query_mix: Mapping[TierId | str, int]) -> CostReport:
    mix = {t: 0 for t in TierId}
    for key, count in query_mix.items():
        if count < 0:
            raise ValueError("query counts must be nonnegative")
        mix[TierId(key)] += int(count)
    return CostReport(mix)


_MIX_ALIASES = {
    "s1": TierId.SYSTEM1,
    "s2": TierId.SYSTEM2,
    "ext": TierId.EXTENDED,
    **{t.value.lower(): t for t in TierId},
}


def parse_mix(text: str) -> dict[TierId, int]:
    """Parse ``s1=N,s2=N,ext=N``."""
    out: dict[TierId, int] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, _, value = part.partition("=")
        key = key.strip().lower()
        tier = _MIX_ALIASES.get(key)
        if tier is None or not value.strip().isdigit():
            raise ValueError(f"bad mix entry {part!r}; expected s1=N,s2=N,ext=N")
        out[tier] = out.get(tier, 0) + int(value)
    return out


# -- plans ------------------------------------------------------------------


@dataclass(frozen=True)
class SubTask:
    id: str
    description: str = ""
    depends_on: frozenset[str] = frozenset()
    compensation: str | None = None


@dataclass(frozen=True)
class Plan:
    tasks: tuple[SubTask, ...]
    task: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "tasks", tuple(self.tasks))

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self.tasks]

    def get(self, task_id: str) -> SubTask:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    @property
    def edges(self) -> list[tuple[str, str]]:
        return sorted((d, t.id) for t in self.tasks for d in t.depends_on)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Plan:
        tasks = [
            SubTask(
                str(t["id"]),
                t.get("desc", t.get("description", "")),
                frozenset(str(d) for d in t.get("deps", t.get("depends_on", []))),
                t.get("compensation"),
            )
            for t in data.get("tasks", [])
        ]
        return cls(tuple(tasks), data.get("task", ""))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "tasks": [
                {"id": t.id, "desc": t.description, "deps": sorted(t.depends_on), "compensation": t.compensation}
                for t in self.tasks
            ]
        }
        if self.task:
            out["task"] = self.task
        return out

    @classmethod
    def load(cls, path: str | Path) -> Plan:
        return validate_plan(cls.from_dict(json.loads(Path(path).read_text())))


def topological_order(plan: Plan) -> list[str]:
    """Kahn's algorithm, smallest ready id first. Raises CyclicPlan."""
    ids = plan.ids
    if len(set(ids)) != len(ids):
        raise PatternloomError("duplicate subtask ids")
    known = set(ids)
    for t in plan.tasks:
        missing = t.depends_on - known
        if missing:
            raise PatternloomError(f"subtask {t.id!r} depends on unknown {sorted(missing)}")
    remaining = {t.id: set(t.depends_on) for t in plan.tasks}
    order: list[str] = []
    while remaining:
        ready = sorted(i for i, deps in remaining.items() if not deps)
        if not ready:
            raise CyclicPlan(f"dependency cycle among {sorted(remaining)}")
        nxt = ready[0]
        order.append(nxt)
        del remaining[nxt]
        for deps in remaining.values():
            deps.discard(nxt)
    return order


def validate_plan(plan: Plan) -> Plan:
    topological_order(plan)
    return plan


def plan_fixtures() -> dict[str, Plan]:
    """Fixture plans shipped in ``data/plans``, keyed by their task text."""
    out: dict[str, Plan] = {}
    for entry in sorted(resources.files("patternloom").joinpath("data/plans").iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".json"):
            p = Plan.from_dict(json.loads(entry.read_text()))
            out[p.task or entry.name[:-5]] = p
    return out


def planner_rules(fixtures: Mapping[str, Plan] | None = None) -> list[dict[str, Any]]:
    """Scripted-model rules that answer ``PLAN: <task>`` with a fixture DAG."""
    fixtures = plan_fixtures() if fixtures is None else fixtures
    return [{"match": f"PLAN: {task}", "response": json.dumps(p.to_dict())} for task, p in fixtures.items()]


def plan(task: str, model: ModelBackend) -> Plan:
    """Ask the model for a plan; anything that is not a JSON plan becomes a single subtask."""
    done = model.complete(f"PLAN: {task}", 4096)
    try:
        data = json.loads(done.text)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, dict) and isinstance(data.get("tasks"), list):
        result = Plan.from_dict({**data, "task": data.get("task", task)})
    else:
        result = Plan((SubTask("t1", task),), task)
    return validate_plan(result)


# -- saga execution -----------------------------------------------------------

Worker = Callable[[SubTask], Any]
Compensator = Callable[[SubTask], Any]


class SubTaskFailure(PatternloomError):
    pass


@dataclass
class ExecutionRecord:
    completed: list[str] = field(default_factory=list)
    failed: str | None = None
    compensated: list[str] = field(default_factory=list)
    error: str | None = None
    results: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failed is None

    def to_dict(self) -> dict[str, Any]:
        return {"completed": self.completed, "failed": self.failed, "compensated": self.compensated, "error": self.error}


def _resolve(workers: Mapping[str, Worker] | Worker | None, task: SubTask) -> Worker | None:
    if workers is None:
        return None
    if callable(workers):
        return workers
    return workers.get(task.id)


def execute_plan(
    plan: Plan,
    workers: Mapping[str, Worker] | Worker | None = None,
    fail_at: str | None = None,
    *,
    compensators: Mapping[str, Compensator] | Compensator | None = None,
    concurrent: bool = False,
) -> ExecutionRecord:
    """Run a plan as a saga.

    Tasks start once their dependencies complete, smallest id first. A failing
    task (``fail_at`` or a worker that raises) stops new starts; then every
    completed task with a compensation is undone in reverse completion order.
    With ``concurrent=True`` each wave of ready tasks runs in a thread pool and
    completions are recorded in id order.
    """
    validate_plan(plan)
    if fail_at is not None and fail_at not in plan.ids:
        raise KeyError(f"fail_at {fail_at!r} is not in the plan")
    record = ExecutionRecord()
    remaining = {t.id: set(t.depends_on) for t in plan.tasks}
    tasks = {t.id: t for t in plan.tasks}

    def run_one(task: SubTask) -> tuple[bool, Any]:
        if task.id == fail_at:
            return False, SubTaskFailure(f"subtask {task.id!r} failed (injected)")
        worker = _resolve(workers, task)
        try:
            return True, (worker(task) if worker else None)
        except Exception as exc:
            return False, exc

    while remaining and record.failed is None:
        ready = sorted(i for i, deps in remaining.items() if not deps)
        wave = ready if concurrent else ready[:1]
        if concurrent and len(wave) > 1:
            with ThreadPoolExecutor(max_workers=len(wave)) as pool:
                outcomes = list(pool.map(lambda i: run_one(tasks[i]), wave))
        else:
            outcomes = [run_one(tasks[i]) for i in wave]
        for task_id, (ok, value) in zip(wave, outcomes):
            del remaining[task_id]
            if ok:
                record.completed.append(task_id)
                record.results[task_id] = value
                for deps in remaining.values():
                    deps.discard(task_id)
            elif record.failed is None:
                record.failed = task_id
                record.error = str(value)

    if record.failed is not None:
        for task_id in reversed(record.completed):
            task = tasks[task_id]
            if task.compensation is None:
                continue
            comp = _resolve(compensators, task)
            if comp is not None:
                comp(task)
            record.compensated.append(task_id)
    return record


def plan_and_execute(
    task: str,
    model: ModelBackend,
    workers: Mapping[str, Worker] | Worker | None = None,
    fail_at: str | None = None,
) -> tuple[Plan, ExecutionRecord]:
    p = plan(task, model)
    return p, execute_plan(p, workers, fail_at)

