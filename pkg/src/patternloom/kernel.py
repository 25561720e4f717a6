"""Topology combinators and their executor.

A workflow is a finite tree whose leaves are :class:`Step` objects and whose
inner nodes are one of six combinators: :class:`Chain`, :class:`Route`,
:class:`Parallel`, :class:`Orchestrate`, :class:`Loop` and :class:`Hierarchy`.
:func:`execute` walks the tree, threads a :class:`Context` through it, charges
every step to a :class:`TokenLedger` and records a :class:`Trace`.
"""

from __future__ import annotations

import json
import re
from collections.abc import Callable, Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from string import Template
from typing import Any, Union

from patternloom.errors import BudgetExceeded, MalformedWorkflow, PatternloomError, StepFailure
from patternloom.model_backend import ModelBackend, ScriptedModel, tokenize

FUNCTION_TAGS = ("C1", "C2", "C3", "C4", "C5", "C6", "C7")
_MONEY_EPS = 1e-12
_PAYLOAD_TEXT_LIMIT = 200


class Priority(str, Enum):
    P0 = "P0"
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"


@dataclass(frozen=True)
class Slot:
    content: str
    tokens: int
    priority: Priority | None = None

    @classmethod
    def of(cls, content: str, priority: Priority | None = None) -> Slot:
        return cls(content, tokenize(content), priority)


@dataclass(frozen=True)
class HistoryEntry:
    step: str
    function: str
    output: str
    tokens_in: int
    tokens_out: int


@dataclass
class Context:
    """Working memory threaded through a workflow.

    ``branches`` is empty except while an aggregator or synthesizer runs, when
    it holds the read-only branch contexts in declared order.
    """

    task: str
    slots: dict[str, Slot] = field(default_factory=dict)
    history: list[HistoryEntry] = field(default_factory=list)
    branches: tuple[Context, ...] = ()

    def get(self, name: str, default: str = "") -> str:
        slot = self.slots.get(name)
        return default if slot is None else slot.content

    def write(self, name: str, content: str, priority: Priority | None = None) -> None:
        self.slots[name] = Slot.of(content, priority)

    def copy(self) -> Context:
        return Context(self.task, dict(self.slots), list(self.history))

    @property
    def last_output(self) -> str:
        return self.history[-1].output if self.history else ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "slots": {
                k: {"content": s.content, "tokens": s.tokens, "priority": s.priority.value if s.priority else None}
                for k, s in self.slots.items()
            },
            "history": [h.step for h in self.history],
        }


@dataclass
class StepOutcome:
    """What a step handler returns.

    ``writes`` maps slot names to content (or ``(content, priority)``).
    ``dollars`` overrides the rate-based price of the ledger entry.
    ``events`` are extra ``(kind, payload)`` trace records, e.g. gate decisions.
    """

    output: str = ""
    writes: dict[str, Any] = field(default_factory=dict)
    tokens_in: int = 0
    tokens_out: int = 0
    dollars: float | None = None
    label: str | None = None
    events: list[tuple[EventKind, dict[str, Any]]] = field(default_factory=list)


Handler = Callable[[Context, ModelBackend], StepOutcome]


@dataclass(frozen=True, eq=False)
class Step:
    name: str
    function: str
    handler: Handler
    cost_cap: int | None = None
    rate: float = 0.0
    meta: Mapping[str, Any] | None = None


@dataclass(frozen=True, eq=False)
class Chain:
    children: tuple[WorkflowNode, ...]
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True, eq=False)
class Route:
    classifier: Step
    branches: Mapping[str, WorkflowNode]
    default: WorkflowNode | None
    name: str = ""


@dataclass(frozen=True, eq=False)
class Parallel:
    branches: tuple[WorkflowNode, ...]
    aggregator: Step
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "branches", tuple(self.branches))


@dataclass(frozen=True, eq=False)
class Orchestrate:
    coordinator: Step
    workers: tuple[WorkflowNode, ...]
    synthesizer: Step
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "workers", tuple(self.workers))


@dataclass(frozen=True, eq=False)
class Loop:
    body: WorkflowNode
    exit: Callable[[Context], bool]
    max_iterations: int
    name: str = ""


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """Levels ordered outermost first; level ``i`` wraps levels ``i+1..``.

    ``caps`` optionally gives a token cap per level. A level's cap bounds
    everything charged inside it, so an inner level is held to the minimum of
    its own cap and every enclosing one.
    """

    levels: tuple[WorkflowNode, ...]
    caps: tuple[int | None, ...] = ()
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "caps", tuple(self.caps))


WorkflowNode = Union[Step, Chain, Route, Parallel, Orchestrate, Loop, Hierarchy]

_KINDS: dict[type, str] = {
    Step: "step",
    Chain: "chain",
    Route: "route",
    Parallel: "parallel",
    Orchestrate: "orchestrate",
    Loop: "loop",
    Hierarchy: "hierarchy",
}


def node_kind(node: Any) -> str:
    return _KINDS.get(type(node), "unknown")


def _segment(node: Any, key: Any) -> str:
    if isinstance(node, Step):
        return node.name
    name = getattr(node, "name", "")
    return name or f"{node_kind(node)}[{key}]"


# -- ledger -----------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    step: str
    tokens_in: int
    tokens_out: int
    dollars: float

    @property
    def tokens(self) -> int:
        return self.tokens_in + self.tokens_out

    def to_dict(self) -> dict[str, Any]:
        return {"step": self.step, "tokens_in": self.tokens_in, "tokens_out": self.tokens_out, "dollars": self.dollars}


@dataclass
class _Scope:
    start_tokens: int
    start_dollars: float
    cap_tokens: int | None
    cap_dollars: float | None


class TokenLedger:
    """Token and dollar accounting against optional caps."""

    def __init__(self, budget_tokens: int | None = None, budget_dollars: float | None = None) -> None:
        self.entries: list[LedgerEntry] = []
        self.budget_tokens = budget_tokens
        self.budget_dollars = budget_dollars
        self._scopes: list[_Scope] = []

    @property
    def total_tokens(self) -> int:
        return sum(e.tokens for e in self.entries)

    @property
    def total_dollars(self) -> float:
        return sum(e.dollars for e in self.entries)

    def tokens_by_step(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.step] = out.get(e.step, 0) + e.tokens
        return out

    def headroom(self) -> tuple[int | None, float | None]:
        """Remaining tokens and dollars under the tightest active cap."""
        spent_t, spent_d = self.total_tokens, self.total_dollars
        tok = None if self.budget_tokens is None else self.budget_tokens - spent_t
        dol = None if self.budget_dollars is None else self.budget_dollars - spent_d
        for s in self._scopes:
            if s.cap_tokens is not None:
                left = s.cap_tokens - (spent_t - s.start_tokens)
                tok = left if tok is None else min(tok, left)
            if s.cap_dollars is not None:
                left_d = s.cap_dollars - (spent_d - s.start_dollars)
                dol = left_d if dol is None else min(dol, left_d)
        return tok, dol

    def charge(
        self,
        step: str,
        tokens_in: int,
        tokens_out: int,
        rate: float = 0.0,
        dollars: float | None = None,
    ) -> LedgerEntry:
        if tokens_in < 0 or tokens_out < 0:
            raise ValueError("token counts must be nonnegative")
        if rate < 0 or (dollars is not None and dollars < 0):
            raise ValueError("rates must be nonnegative")
        cost = (tokens_in + tokens_out) * rate if dollars is None else dollars
        entry = LedgerEntry(step, tokens_in, tokens_out, cost)
        tok_left, dol_left = self.headroom()
        if tok_left is not None and entry.tokens > tok_left:
            raise BudgetExceeded(
                f"charging {entry.tokens} tokens for {step!r} exceeds the token budget "
                f"({tok_left} left)"
            )
        if dol_left is not None and cost > dol_left + _MONEY_EPS:
            raise BudgetExceeded(f"charging ${cost:.6f} for {step!r} exceeds the dollar budget (${dol_left:.6f} left)")
        self.entries.append(entry)
        return entry

    @contextmanager
    def scope(self, cap_tokens: int | None = None, cap_dollars: float | None = None) -> Iterator[None]:
        self._scopes.append(_Scope(self.total_tokens, self.total_dollars, cap_tokens, cap_dollars))
        try:
            yield
        finally:
            self._scopes.pop()

    def shard(self) -> TokenLedger:
        tok, dol = self.headroom()
        return TokenLedger(tok, dol)

    def absorb(self, shard: TokenLedger) -> list[LedgerEntry]:
        return [self.charge(e.step, e.tokens_in, e.tokens_out, dollars=e.dollars) for e in shard.entries]

    def to_dict(self) -> dict[str, Any]:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "total_tokens": self.total_tokens,
            "total_dollars": self.total_dollars,
            "budget_tokens": self.budget_tokens,
            "budget_dollars": self.budget_dollars,
        }


def charge(
    ledger: TokenLedger,
    step_name: str,
    tokens_in: int,
    tokens_out: int,
    rate_dollars_per_token: float = 0.0,
    dollars: float | None = None,
) -> TokenLedger:
    ledger.charge(step_name, tokens_in, tokens_out, rate_dollars_per_token, dollars)
    return ledger


# -- trace ------------------------------------------------------------------


class EventKind(str, Enum):
    NODE_ENTER = "NodeEnter"
    NODE_EXIT = "NodeExit"
    STEP_RUN = "StepRun"
    BRANCH_TAKEN = "BranchTaken"
    ITERATION_START = "IterationStart"
    BUDGET_CHARGE = "BudgetCharge"
    GATE_DECISION = "GateDecision"
    ERROR = "Error"


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    kind: EventKind
    path: tuple[str, ...]
    payload: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"seq": self.seq, "kind": self.kind.value, "path": list(self.path), "payload": self.payload}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TraceEvent:
        return cls(int(d["seq"]), EventKind(d["kind"]), tuple(d["path"]), dict(d.get("payload", {})))


@dataclass
class Trace:
    events: list[TraceEvent] = field(default_factory=list)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def __getitem__(self, i: int) -> TraceEvent:
        return self.events[i]

    def of_kind(self, kind: EventKind) -> list[TraceEvent]:
        return [e for e in self.events if e.kind is kind]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)

    @classmethod
    def from_jsonl(cls, text: str) -> Trace:
        return cls([TraceEvent.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()])

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    path: tuple[str, ...]
    detail: str = ""

    def __str__(self) -> str:
        where = "/".join(self.path) or "<root>"
        return f"{self.kind} at {where}" + (f": {self.detail}" if self.detail else "")


def validate(root: Any) -> list[Violation]:
    """Return every invariant violation in ``root``; empty means well formed."""
    out: list[Violation] = []
    seen_names: dict[str, tuple[str, ...]] = {}

    def step(s: Any, path: tuple[str, ...]) -> None:
        if not isinstance(s, Step):
            out.append(Violation("InvalidStep", path, f"expected a Step, got {type(s).__name__}"))
            return
        if s.function not in FUNCTION_TAGS:
            out.append(Violation("InvalidFunctionTag", path, repr(s.function)))
        if not callable(s.handler):
            out.append(Violation("InvalidHandler", path))
        if s.cost_cap is not None and s.cost_cap < 0:
            out.append(Violation("InvalidCostCap", path))
        if s.name in seen_names:
            out.append(Violation("DuplicateStepName", path, f"{s.name!r} also at {'/'.join(seen_names[s.name])}"))
        else:
            seen_names[s.name] = path

    def walk(node: Any, path: tuple[str, ...], ancestors: frozenset[int]) -> None:
        if id(node) in ancestors:
            out.append(Violation("Cycle", path))
            return
        inner = ancestors | {id(node)}
        if isinstance(node, Step):
            step(node, path)
        elif isinstance(node, Chain):
            for i, child in enumerate(node.children):
                walk(child, path + (_segment(child, i),), inner)
        elif isinstance(node, Route):
            step(node.classifier, path + (getattr(node.classifier, "name", "classifier"),))
            for label, child in node.branches.items():
                walk(child, path + (_segment(child, label),), inner)
            if node.default is None:
                out.append(Violation("MissingDefault", path))
            else:
                walk(node.default, path + (_segment(node.default, "default"),), inner)
        elif isinstance(node, Parallel):
            if len(node.branches) < 2:
                out.append(Violation("TooFewBranches", path, f"{len(node.branches)} branch(es)"))
            for i, child in enumerate(node.branches):
                walk(child, path + (_segment(child, i),), inner)
            step(node.aggregator, path + (getattr(node.aggregator, "name", "aggregator"),))
        elif isinstance(node, Orchestrate):
            step(node.coordinator, path + (getattr(node.coordinator, "name", "coordinator"),))
            if not node.workers:
                out.append(Violation("NoWorkers", path))
            for i, child in enumerate(node.workers):
                walk(child, path + (_segment(child, i),), inner)
            step(node.synthesizer, path + (getattr(node.synthesizer, "name", "synthesizer"),))
        elif isinstance(node, Loop):
            if not isinstance(node.max_iterations, int) or node.max_iterations < 1:
                out.append(Violation("InvalidIterationCap", path, repr(node.max_iterations)))
            if not callable(node.exit):
                out.append(Violation("InvalidExit", path))
            walk(node.body, path + (_segment(node.body, 0),), inner)
        elif isinstance(node, Hierarchy):
            if not node.levels:
                out.append(Violation("EmptyHierarchy", path))
            if node.caps and len(node.caps) != len(node.levels):
                out.append(Violation("InvalidLevelCaps", path, "one cap per level required"))
            if any(c is not None and c < 0 for c in node.caps):
                out.append(Violation("InvalidLevelCaps", path, "caps must be nonnegative"))
            level_path = path
            for i, child in enumerate(node.levels):
                level_path = level_path + (f"level{i}",)
                walk(child, level_path + (_segment(child, 0),), inner)
        else:
            out.append(Violation("UnknownNode", path, type(node).__name__))

    walk(root, (_segment(root, 0) if isinstance(root, tuple(_KINDS)) else "root",), frozenset())
    return out


# -- execution ----------------------------------------------------------------

_Event = tuple[EventKind, tuple[str, ...], dict[str, Any]]


def _clip(text: str) -> str:
    return text if len(text) <= _PAYLOAD_TEXT_LIMIT else text[:_PAYLOAD_TEXT_LIMIT] + "..."


class _Run:
    """One single-writer execution scope. Branches get their own ``_Run``."""

    def __init__(self, backend: ModelBackend, ledger: TokenLedger, concurrent: bool) -> None:
        self.backend = backend
        self.ledger = ledger
        self.concurrent = concurrent
        self.events: list[_Event] = []

    def emit(self, kind: EventKind, path: tuple[str, ...], payload: dict[str, Any]) -> None:
        self.events.append((kind, path, payload))

    def node(self, node: WorkflowNode, ctx: Context, path: tuple[str, ...]) -> None:
        kind = node_kind(node)
        if isinstance(node, Step):
            self.step(node, ctx, path)
            return
        self.emit(EventKind.NODE_ENTER, path, {"kind": kind})
        extra: dict[str, Any] = {}
        try:
            if isinstance(node, Chain):
                for i, child in enumerate(node.children):
                    self.node(child, ctx, path + (_segment(child, i),))
            elif isinstance(node, Route):
                extra = self.route(node, ctx, path)
            elif isinstance(node, Parallel):
                branches = [(child, path + (_segment(child, i),)) for i, child in enumerate(node.branches)]
                self.fan_out(branches, node.aggregator, ctx, path)
            elif isinstance(node, Orchestrate):
                self.step(node.coordinator, ctx, path + (node.coordinator.name,))
                workers = [(child, path + (_segment(child, i),)) for i, child in enumerate(node.workers)]
                self.fan_out(workers, node.synthesizer, ctx, path)
            elif isinstance(node, Loop):
                extra = self.loop(node, ctx, path)
            elif isinstance(node, Hierarchy):
                self.level(node, 0, ctx, path)
        except PatternloomError as exc:
            self._fail(exc, path)
            self.emit(EventKind.NODE_EXIT, path, {"kind": kind, "status": "error"})
            raise
        self.emit(EventKind.NODE_EXIT, path, {"kind": kind, "status": "ok", **extra})

    def _fail(self, exc: PatternloomError, path: tuple[str, ...]) -> None:
        if getattr(exc, "_traced", False):
            return
        exc._traced = True  # type: ignore[attr-defined]
        self.emit(EventKind.ERROR, path, {"error": type(exc).__name__, "message": str(exc)})

    def step(self, step: Step, ctx: Context, path: tuple[str, ...], view: Context | None = None) -> StepOutcome:
        self.emit(EventKind.NODE_ENTER, path, {"kind": "step", "function": step.function})
        try:
            try:
                outcome = step.handler(view if view is not None else ctx, self.backend)
            except PatternloomError:
                raise
            except Exception as exc:  # handler bugs and injected faults alike
                raise StepFailure(step.name, exc) from exc
            if not isinstance(outcome, StepOutcome):
                raise StepFailure(step.name, f"handler returned {type(outcome).__name__}, not StepOutcome")
            used = outcome.tokens_in + outcome.tokens_out
            if step.cost_cap is not None and used > step.cost_cap:
                raise BudgetExceeded(f"step {step.name!r} used {used} tokens, cap is {step.cost_cap}")
            entry = self.ledger.charge(step.name, outcome.tokens_in, outcome.tokens_out, step.rate, outcome.dollars)
        except PatternloomError as exc:
            self._fail(exc, path)
            self.emit(EventKind.NODE_EXIT, path, {"kind": "step", "status": "error"})
            raise
        self.emit(EventKind.BUDGET_CHARGE, path, entry.to_dict())
        run_payload: dict[str, Any] = {
            "step": step.name,
            "function": step.function,
            "tokens_in": entry.tokens_in,
            "tokens_out": entry.tokens_out,
            "dollars": entry.dollars,
            "output": _clip(outcome.output),
        }
        if outcome.label is not None:
            run_payload["label"] = outcome.label
        self.emit(EventKind.STEP_RUN, path, run_payload)
        for kind, payload in outcome.events:
            self.emit(EventKind(kind), path, dict(payload))
        for name, value in outcome.writes.items():
            if isinstance(value, tuple):
                ctx.write(name, value[0], value[1])
            else:
                ctx.write(name, value)
        ctx.history.append(HistoryEntry(step.name, step.function, outcome.output, entry.tokens_in, entry.tokens_out))
        self.emit(EventKind.NODE_EXIT, path, {"kind": "step", "status": "ok"})
        return outcome

    def route(self, node: Route, ctx: Context, path: tuple[str, ...]) -> dict[str, Any]:
        outcome = self.step(node.classifier, ctx, path + (node.classifier.name,))
        label = outcome.label if outcome.label is not None else outcome.output.strip()
        if label in node.branches:
            target, key, defaulted = node.branches[label], label, False
        else:
            target, key, defaulted = node.default, "default", True
        assert target is not None  # validate() guarantees a default
        self.emit(EventKind.BRANCH_TAKEN, path, {"label": label, "branch": key, "defaulted": defaulted})
        self.node(target, ctx, path + (_segment(target, key),))
        return {"branch": key}

    def loop(self, node: Loop, ctx: Context, path: tuple[str, ...]) -> dict[str, Any]:
        done = False
        iterations = 0
        body_path = path + (_segment(node.body, 0),)
        for i in range(node.max_iterations):
            iterations = i + 1
            self.emit(EventKind.ITERATION_START, path, {"iteration": iterations})
            self.node(node.body, ctx, body_path)
            try:
                done = bool(node.exit(ctx))
            except Exception as exc:
                raise StepFailure(f"{'/'.join(path)}:exit", exc) from exc
            if done:
                break
        return {"iterations": iterations, "exited": done}

    def level(self, node: Hierarchy, i: int, ctx: Context, parent: tuple[str, ...]) -> None:
        path = parent + (f"level{i}",)
        cap = node.caps[i] if node.caps else None
        self.emit(EventKind.NODE_ENTER, path, {"kind": "level", "level": i, "cap_tokens": cap})
        try:
            with self.ledger.scope(cap_tokens=cap):
                child = node.levels[i]
                self.node(child, ctx, path + (_segment(child, 0),))
                if i + 1 < len(node.levels):
                    self.level(node, i + 1, ctx, path)
        except PatternloomError as exc:
            self._fail(exc, path)
            self.emit(EventKind.NODE_EXIT, path, {"kind": "level", "status": "error"})
            raise
        self.emit(EventKind.NODE_EXIT, path, {"kind": "level", "status": "ok"})

    def _branch(self, child: WorkflowNode, ctx: Context, path: tuple[str, ...]) -> tuple[_Run, Context, BaseException | None]:
        sub = _Run(self.backend, self.ledger.shard(), self.concurrent)
        local = ctx.copy()
        try:
            sub.node(child, local, path)
        except PatternloomError as exc:
            return sub, local, exc
        return sub, local, None

    def fan_out(
        self,
        branches: list[tuple[WorkflowNode, tuple[str, ...]]],
        joiner: Step,
        ctx: Context,
        path: tuple[str, ...],
    ) -> None:
        if self.concurrent and len(branches) > 1:
            with ThreadPoolExecutor(max_workers=len(branches)) as pool:
                futures = [pool.submit(self._branch, child, ctx, p) for child, p in branches]
                results = [f.result() for f in futures]
        else:
            results = []
            for child, p in branches:
                results.append(self._branch(child, ctx, p))
                if results[-1][2] is not None:
                    break
        # join point: merge in declared order, single writer
        fork_len = len(ctx.history)
        branch_ctxs: list[Context] = []
        for sub, local, err in results:
            self.events.extend(sub.events)
            try:
                self.ledger.absorb(sub.ledger)
            except BudgetExceeded:
                if err is None:
                    raise
            if err is not None:
                raise err
            branch_ctxs.append(local)
            ctx.history.extend(local.history[fork_len:])
        view = ctx.copy()
        view.branches = tuple(branch_ctxs)
        self.step(joiner, ctx, path + (joiner.name,), view=view)


def _materialize(events: list[_Event]) -> Trace:
    return Trace([TraceEvent(i, kind, path, payload) for i, (kind, path, payload) in enumerate(events)])


def execute(
    root: WorkflowNode,
    ctx: Context,
    ledger: TokenLedger | None = None,
    backend: ModelBackend | None = None,
    *,
    concurrent: bool = False,
) -> tuple[Context, Trace]:
    """Run ``root`` on a copy of ``ctx``.

    Raises :class:`MalformedWorkflow` before running anything if ``validate``
    reports violations. ``BudgetExceeded`` and ``StepFailure`` carry the
    partial trace in their ``trace`` attribute; the trace is balanced either way.
    """
    violations = validate(root)
    if violations:
        raise MalformedWorkflow(violations)
    ledger = ledger if ledger is not None else TokenLedger()
    backend = backend if backend is not None else ScriptedModel()
    run = _Run(backend, ledger, concurrent)
    work = ctx.copy()
    try:
        run.node(root, work, (_segment(root, 0),))
    except PatternloomError as exc:
        exc.trace = _materialize(run.events)  # type: ignore[attr-defined]
        if isinstance(exc, BudgetExceeded):
            exc.ledger = ledger
        raise
    return work, _materialize(run.events)


# -- step helpers -------------------------------------------------------------


def _template_vars(ctx: Context) -> dict[str, str]:
    values = {name: slot.content for name, slot in ctx.slots.items()}
    values["task"] = ctx.task
    values["last"] = ctx.last_output
    values["branches"] = "\n".join(f"[{i}] {b.last_output}" for i, b in enumerate(ctx.branches))
    return values


def llm_step(
    name: str,
    function: str,
    prompt: str,
    *,
    max_tokens: int = 256,
    output: str | None = None,
    label: bool = False,
    rate: float = 0.0,
    cost_cap: int | None = None,
) -> Step:
    """A step that fills ``prompt`` from the context and asks the backend.

    ``prompt`` is a :class:`string.Template`; it sees ``$task``, ``$last``,
    ``$branches`` and every slot by name. With ``label=True`` the stripped
    completion doubles as a route label.
    """
    template = Template(prompt)

    def handler(ctx: Context, backend: ModelBackend) -> StepOutcome:
        done = backend.complete(template.safe_substitute(_template_vars(ctx)), max_tokens)
        return StepOutcome(
            output=done.text,
            writes={output: done.text} if output else {},
            tokens_in=done.tokens_in,
            tokens_out=done.tokens_out,
            label=done.text.strip() if label else None,
        )

    meta = {"prompt": prompt, "max_tokens": max_tokens, "output": output, "label": label}
    return Step(name, function, handler, cost_cap=cost_cap, rate=rate, meta=meta)


def static_step(name: str, function: str, output: str, *, tokens: int = 0, write: str | None = None) -> Step:
    """A step that always emits ``output``, billing ``tokens`` output tokens."""

    def handler(ctx: Context, backend: ModelBackend) -> StepOutcome:
        return StepOutcome(output=output, writes={write: output} if write else {}, tokens_out=tokens)

    return Step(name, function, handler, meta={"static": output, "tokens": tokens, "output": write})


@dataclass(frozen=True)
class SlotPredicate:
    """Serializable loop exit test over a context slot."""

    slot: str
    contains: str | None = None
    equals: str | None = None

    def __call__(self, ctx: Context) -> bool:
        if self.slot not in ctx.slots:
            return False
        value = ctx.get(self.slot)
        if self.equals is not None:
            return value.strip() == self.equals
        if self.contains is not None:
            return self.contains in value
        return True

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"slot": self.slot}
        if self.contains is not None:
            d["contains"] = self.contains
        if self.equals is not None:
            d["equals"] = self.equals
        return d


def never(ctx: Context) -> bool:
    return False


# -- JSON descriptors -----------------------------------------------------------

_STEP_FIELDS = re.compile(r"^(name|function|prompt|max_tokens|output|label|rate|cost_cap|static|tokens|ref|type)$")


def _step_from_dict(d: Mapping[str, Any], registry: Mapping[str, Step]) -> Step:
    unknown = [k for k in d if not _STEP_FIELDS.match(k)]
    if unknown:
        raise MalformedWorkflow([Violation("UnknownField", (str(d.get("name", "?")),), ", ".join(unknown))])
    if "ref" in d:
        try:
            return registry[d["ref"]]
        except KeyError:
            raise MalformedWorkflow([Violation("UnknownStepRef", (d["ref"],))]) from None
    name = d["name"]
    function = d.get("function", "C3")
    if "static" in d:
        return static_step(name, function, d["static"], tokens=int(d.get("tokens", 0)), write=d.get("output"))
    return llm_step(
        name,
        function,
        d.get("prompt", "$task"),
        max_tokens=int(d.get("max_tokens", 256)),
        output=d.get("output"),
        label=bool(d.get("label", False)),
        rate=float(d.get("rate", 0.0)),
        cost_cap=d.get("cost_cap"),
    )


def workflow_from_dict(d: Mapping[str, Any], registry: Mapping[str, Step] | None = None) -> WorkflowNode:
    """Build a workflow from its JSON descriptor (``type`` picks the node kind)."""
    reg = registry or {}
    kind = d.get("type")
    name = d.get("name", "")

    def sub(x: Mapping[str, Any]) -> WorkflowNode:
        return workflow_from_dict(x, reg)

    def leaf(x: Mapping[str, Any]) -> Step:
        node = sub(x)
        if not isinstance(node, Step):
            raise MalformedWorkflow([Violation("InvalidStep", (name or str(kind),), "expected a step")])
        return node

    if kind == "step":
        return _step_from_dict(d, reg)
    if kind == "chain":
        return Chain(tuple(sub(c) for c in d.get("children", [])), name)
    if kind == "route":
        default = d.get("default")
        return Route(
            leaf(d["classifier"]),
            {label: sub(b) for label, b in d.get("branches", {}).items()},
            None if default is None else sub(default),
            name,
        )
    if kind == "parallel":
        return Parallel(tuple(sub(b) for b in d.get("branches", [])), leaf(d["aggregator"]), name)
    if kind == "orchestrate":
        return Orchestrate(leaf(d["coordinator"]), tuple(sub(w) for w in d.get("workers", [])), leaf(d["synthesizer"]), name)
    if kind == "loop":
        exit_spec = d.get("exit", "never")
        exit_fn: Callable[[Context], bool] = never if exit_spec == "never" else SlotPredicate(**exit_spec)
        return Loop(sub(d["body"]), exit_fn, d.get("max_iterations", 1), name)
    if kind == "hierarchy":
        return Hierarchy(tuple(sub(lv) for lv in d.get("levels", [])), tuple(d.get("caps", ())), name)
    raise MalformedWorkflow([Violation("UnknownNodeType", (name or "root",), repr(kind))])


def _step_to_dict(s: Step) -> dict[str, Any]:
    meta = dict(s.meta or {})
    out: dict[str, Any] = {"type": "step", "name": s.name, "function": s.function}
    if "static" in meta:
        out["static"] = meta["static"]
        out["tokens"] = meta["tokens"]
        if meta.get("output"):
            out["output"] = meta["output"]
    elif "prompt" in meta:
        out["prompt"] = meta["prompt"]
        out["max_tokens"] = meta["max_tokens"]
        if meta.get("output"):
            out["output"] = meta["output"]
        if meta.get("label"):
            out["label"] = True
    else:
        out = {"type": "step", "ref": s.name}
    if s.rate:
        out["rate"] = s.rate
    if s.cost_cap is not None:
        out["cost_cap"] = s.cost_cap
    return out


def workflow_to_dict(node: WorkflowNode) -> dict[str, Any]:
    if isinstance(node, Step):
        return _step_to_dict(node)
    out: dict[str, Any] = {"type": node_kind(node)}
    if node.name:
        out["name"] = node.name
    if isinstance(node, Chain):
        out["children"] = [workflow_to_dict(c) for c in node.children]
    elif isinstance(node, Route):
        out["classifier"] = _step_to_dict(node.classifier)
        out["branches"] = {k: workflow_to_dict(v) for k, v in node.branches.items()}
        if node.default is not None:
            out["default"] = workflow_to_dict(node.default)
    elif isinstance(node, Parallel):
        out["branches"] = [workflow_to_dict(b) for b in node.branches]
        out["aggregator"] = _step_to_dict(node.aggregator)
    elif isinstance(node, Orchestrate):
        out["coordinator"] = _step_to_dict(node.coordinator)
        out["workers"] = [workflow_to_dict(w) for w in node.workers]
        out["synthesizer"] = _step_to_dict(node.synthesizer)
    elif isinstance(node, Loop):
        out["body"] = workflow_to_dict(node.body)
        out["max_iterations"] = node.max_iterations
        out["exit"] = node.exit.to_dict() if isinstance(node.exit, SlotPredicate) else "never"
    elif isinstance(node, Hierarchy):
        out["levels"] = [workflow_to_dict(lv) for lv in node.levels]
        if node.caps:
            out["caps"] = list(node.caps)
    return out


def load_workflow(path: str | Path, registry: Mapping[str, Step] | None = None) -> WorkflowNode:
    return workflow_from_dict(json.loads(Path(path).read_text()), registry)

