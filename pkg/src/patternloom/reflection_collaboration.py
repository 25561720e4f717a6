"""Generator-Critic, Self-Heal Loop and Fan-Out/Gather on top of the kernel."""

from __future__ import annotations

import json
import re
from collections import Counter
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from patternloom.errors import InterdependentSubtasks
from patternloom.kernel import (
    Chain,
    Context,
    EventKind,
    Loop,
    Parallel,
    Route,
    SlotPredicate,
    Step,
    StepOutcome,
    TokenLedger,
    Trace,
    execute,
)
from patternloom.model_backend import ModelBackend

DEFAULT_THRESHOLD = 0.8
MAX_CRITIQUE_PASSES = 2

_SCORE = re.compile(r"score\s*[:=]\s*([-+]?\d*\.?\d+)", re.IGNORECASE)
_FEEDBACK = re.compile(r"feedback\s*[:=]\s*(.*)", re.IGNORECASE | re.DOTALL)


class CritiqueSource(str, Enum):
    SELF_PROMPT = "SelfPrompt"
    CROSS_MODEL = "CrossModel"
    TOOL_GROUNDED = "ToolGrounded"


@dataclass(frozen=True)
class Critique:
    score: float
    feedback: str
    source: CritiqueSource
    tokens_in: int = 0
    tokens_out: int = 0


def parse_critique(text: str, source: CritiqueSource) -> Critique:
    """Read ``score: 0.4 | feedback: ...`` style critic output; no score means 0."""
    m = _SCORE.search(text)
    score = float(m.group(1)) if m else 0.0
    fb = _FEEDBACK.search(text)
    return Critique(min(1.0, max(0.0, score)), fb.group(1).strip() if fb else text.strip(), source)


@dataclass(frozen=True)
class ModelCritic:
    """Asks a model to grade the draft.

    Without ``model`` it reuses the generator's backend (self-critique with a
    separate prompt); with one it is a cross-model critic.
    """

    model: ModelBackend | None = None
    max_tokens: int = 128

    @property
    def source(self) -> CritiqueSource:
        return CritiqueSource.SELF_PROMPT if self.model is None else CritiqueSource.CROSS_MODEL

    def __call__(self, draft: str, task: str, backend: ModelBackend) -> Critique:
        model = self.model or backend
        done = model.complete(f"CRITIQUE: {draft}\nTASK: {task}", self.max_tokens)
        c = parse_critique(done.text, self.source)
        return Critique(c.score, c.feedback, c.source, done.tokens_in, done.tokens_out)


@dataclass(frozen=True)
class ToolCritic:
    """Deterministic critic backed by a :class:`Verifier`: score is the share of checks passed."""

    verifier: Verifier
    source: CritiqueSource = CritiqueSource.TOOL_GROUNDED

    def __call__(self, draft: str, task: str, backend: ModelBackend) -> Critique:
        result = self.verifier(draft)
        return Critique(result.score, "; ".join(result.diagnostics) or "all checks passed", self.source)


Critic = Callable[[str, str, ModelBackend], Critique]


# -- verifiers ----------------------------------------------------------------


class VerifierKind(str, Enum):
    SCHEMA_CHECK = "schema_check"
    TEST_SUITE_STUB = "test_suite_stub"
    RANGE_CHECK = "range_check"


@dataclass(frozen=True)
class VerifierResult:
    passed: bool
    diagnostics: tuple[str, ...]
    checks: int

    @property
    def score(self) -> float:
        if self.checks == 0:
            return 1.0 if self.passed else 0.0
        return (self.checks - len(self.diagnostics)) / self.checks


_TYPES: dict[str, tuple[type, ...]] = {
    "str": (str,),
    "string": (str,),
    "number": (int, float),
    "int": (int,),
    "bool": (bool,),
    "list": (list,),
    "object": (dict,),
}
_FIRST_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?")


def _schema_check(draft: str, params: dict[str, Any]) -> tuple[list[str], int]:
    required = params.get("required", {})
    if isinstance(required, list):
        required = {k: None for k in required}
    try:
        doc = json.loads(draft)
    except json.JSONDecodeError as exc:
        return [f"invalid JSON: {exc.msg}"], len(required) + 1
    if not isinstance(doc, dict):
        return ["expected a JSON object"], len(required) + 1
    problems = []
    for key in sorted(required):
        if key not in doc:
            problems.append(f"missing key: {key}")
            continue
        want = required[key]
        if want is not None:
            types = _TYPES[want]
            ok = isinstance(doc[key], types) and not (want == "number" and isinstance(doc[key], bool))
            if not ok:
                problems.append(f"wrong type for {key}: expected {want}")
    return problems, len(required) + 1


def _test_suite_stub(draft: str, params: dict[str, Any]) -> tuple[list[str], int]:
    tests: dict[str, str] = params.get("tests", {})
    failed = [f"FAILED {name}: expected {want!r}" for name, want in sorted(tests.items()) if want not in draft]
    return failed, len(tests)


def _range_check(draft: str, params: dict[str, Any]) -> tuple[list[str], int]:
    m = _FIRST_NUMBER.search(draft)
    if m is None:
        return ["no number found"], 1
    value = float(m.group())
    lo, hi = params.get("min", float("-inf")), params.get("max", float("inf"))
    if not lo <= value <= hi:
        return [f"value {m.group()} outside [{lo}, {hi}]"], 1
    return [], 1


_CHECKS = {
    VerifierKind.SCHEMA_CHECK: _schema_check,
    VerifierKind.TEST_SUITE_STUB: _test_suite_stub,
    VerifierKind.RANGE_CHECK: _range_check,
}


@dataclass(frozen=True)
class Verifier:
    kind: VerifierKind
    params: dict[str, Any] = field(default_factory=dict)

    def __call__(self, draft: str) -> VerifierResult:
        problems, checks = _CHECKS[VerifierKind(self.kind)](draft, self.params)
        return VerifierResult(not problems, tuple(problems), checks)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Verifier:
        return cls(VerifierKind(data["kind"]), dict(data.get("params", {})))

    @classmethod
    def load(cls, path: str | Path) -> Verifier:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": VerifierKind(self.kind).value, "params": self.params}


# -- generator-critic -----------------------------------------------------------


@dataclass
class CriticResult:
    draft: str
    passes: int
    score: float
    accepted: bool
    critiques: list[Critique]
    trace: Trace
    ledger: TokenLedger


def _critique_step(name: str, critic: Critic, threshold: float, bias: float, log: list[Critique]) -> Step:
    def handler(ctx: Context, backend: ModelBackend) -> StepOutcome:
        c = critic(ctx.get("draft"), ctx.task, backend)
        log.append(c)
        accepted = c.score + bias >= threshold
        return StepOutcome(
            output=f"score={c.score:.4f} feedback={c.feedback}",
            writes={"score": f"{c.score}", "feedback": c.feedback},
            tokens_in=c.tokens_in,
            tokens_out=c.tokens_out,
            label="accept" if accepted else "revise",
        )

    return Step(name, "C5", handler)


def critic_workflow(
    critic: Critic,
    *,
    threshold: float = DEFAULT_THRESHOLD,
    max_passes: int = MAX_CRITIQUE_PASSES,
    bias: float = 0.0,
    max_tokens: int = 512,
    log: list[Critique] | None = None,
) -> Chain:
    """generate -> critique, plus revise -> critique when the first score misses."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    if max_passes not in (1, 2):
        raise ValueError("max_passes must be 1 or 2")
    log = [] if log is None else log

    def generate(ctx: Context, backend: ModelBackend) -> StepOutcome:
        done = backend.complete(f"DRAFT: {ctx.task}", max_tokens)
        return StepOutcome(done.text, {"draft": done.text}, done.tokens_in, done.tokens_out)

    def revise(ctx: Context, backend: ModelBackend) -> StepOutcome:
        done = backend.complete(f"REVISE: {ctx.get('draft')}\nFEEDBACK: {ctx.get('feedback')}", max_tokens)
        return StepOutcome(done.text, {"draft": done.text}, done.tokens_in, done.tokens_out)

    first = _critique_step("critique-1", critic, threshold, bias, log)
    gen = Step("generate", "C5", generate)
    if max_passes == 1:
        return Chain([gen, first], name="generator-critic")
    second = Chain([Step("revise", "C5", revise), _critique_step("critique-2", critic, threshold, bias, log)], name="revision")
    return Chain([gen, Route(first, {"revise": second}, Chain([], name="accepted"), name="quality-gate")], name="generator-critic")


def generator_critic(
    task: str,
    model: ModelBackend,
    critic: Critic | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    max_passes: int = MAX_CRITIQUE_PASSES,
    *,
    bias: float = 0.0,
    ledger: TokenLedger | None = None,
) -> CriticResult:
    """Bounded critique chain. ``bias`` is added to each score before the threshold test."""
    critic = critic if critic is not None else ModelCritic()
    log: list[Critique] = []
    ledger = ledger if ledger is not None else TokenLedger()
    workflow = critic_workflow(critic, threshold=threshold, max_passes=max_passes, bias=bias, log=log)
    ctx, trace = execute(workflow, Context(task), ledger, model)
    final = log[-1]
    return CriticResult(ctx.get("draft"), len(log), final.score, final.score + bias >= threshold, log, trace, ledger)


# -- self-heal ------------------------------------------------------------------


@dataclass
class HealResult:
    draft: str
    iterations: int
    passed: bool
    diagnostics: list[tuple[str, ...]]
    trace: Trace
    ledger: TokenLedger


def heal_workflow(verifier: Verifier, max_iterations: int, *, max_tokens: int = 512) -> Loop:
    def attempt(ctx: Context, backend: ModelBackend) -> StepOutcome:
        if "diagnostics" in ctx.slots:
            prompt = f"REPAIR: {ctx.task}\nDRAFT: {ctx.get('draft')}\nDIAGNOSTICS: {ctx.get('diagnostics')}"
        else:
            prompt = f"TASK: {ctx.task}"
        done = backend.complete(prompt, max_tokens)
        return StepOutcome(done.text, {"draft": done.text}, done.tokens_in, done.tokens_out)

    def verify(ctx: Context, backend: ModelBackend) -> StepOutcome:
        result = verifier(ctx.get("draft"))
        verdict = "pass" if result.passed else "fail"
        return StepOutcome(
            output=verdict,
            writes={"verdict": verdict, "diagnostics": "; ".join(result.diagnostics)},
        )

    body = Chain([Step("attempt", "C5", attempt), Step("verify", "C5", verify)], name="repair")
    return Loop(body, SlotPredicate("verdict", equals="pass"), max_iterations, name="self-heal")


def self_heal(
    task: str,
    model: ModelBackend,
    verifier: Verifier,
    max_iterations: int,
    *,
    ledger: TokenLedger | None = None,
) -> HealResult:
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    ledger = ledger if ledger is not None else TokenLedger()
    ctx, trace = execute(heal_workflow(verifier, max_iterations), Context(task), ledger, model)
    loop_exit = [e for e in trace.of_kind(EventKind.NODE_EXIT) if e.payload.get("kind") == "loop"][-1]
    diagnostics = [verifier(h.output).diagnostics for h in ctx.history if h.step == "attempt"]
    return HealResult(
        ctx.get("draft"),
        loop_exit.payload["iterations"],
        ctx.get("verdict") == "pass",
        diagnostics,
        trace,
        ledger,
    )


# -- fan-out / gather -----------------------------------------------------------


class GatherStrategy(str, Enum):
    STRUCTURED_CONCAT = "StructuredConcat"
    MAJORITY_VOTE = "MajorityVote"
    COORDINATOR_SYNTHESIS = "CoordinatorSynthesis"


@dataclass(frozen=True)
class WorkerTask:
    prompt: str
    slot: str


@dataclass
class GatherResult:
    branch_outputs: list[str]
    aggregate: str
    strategy: GatherStrategy
    conflicts: list[str]
    worker_tokens: int = 0
    aggregation_tokens: int = 0
    trace: Trace | None = None
    ledger: TokenLedger | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "branch_outputs": self.branch_outputs,
            "aggregate": self.aggregate,
            "strategy": self.strategy.value,
            "conflicts": self.conflicts,
            "worker_tokens": self.worker_tokens,
            "aggregation_tokens": self.aggregation_tokens,
        }


def majority_vote(outputs: Sequence[str]) -> tuple[str, list[str]]:
    """Most common stripped answer; ties go to the earliest branch.

    Returns the winner and the distinct dissenting answers in branch order.
    """
    answers = [o.strip() for o in outputs]
    if not answers:
        return "", []
    counts = Counter(answers)
    best = max(counts.values())
    winner = next(a for a in answers if counts[a] == best)
    conflicts: list[str] = []
    for a in answers:
        if a != winner and a not in conflicts:
            conflicts.append(a)
    return winner, conflicts


def structured_concat(outputs: Sequence[str]) -> str:
    return "\n".join(f"[{i}] {o.strip()}" for i, o in enumerate(outputs))


def _as_tasks(subtasks: Sequence[str | WorkerTask]) -> list[WorkerTask]:
    tasks = [s if isinstance(s, WorkerTask) else WorkerTask(s, f"worker-{i}") for i, s in enumerate(subtasks)]
    seen: set[str] = set()
    for t in tasks:
        if t.slot in seen:
            raise InterdependentSubtasks(f"subtasks share output slot {t.slot!r}")
        seen.add(t.slot)
    return tasks


def fan_out_workflow(
    subtasks: Sequence[str | WorkerTask],
    strategy: GatherStrategy | str,
    *,
    max_tokens: int = 256,
    extra_steps: dict[int, Step] | None = None,
) -> Parallel:
    """One isolated worker per subtask, then a gather step.

    ``extra_steps`` prepends a step to the given worker branches (used to probe
    isolation).
    """
    strategy = GatherStrategy(strategy)
    tasks = _as_tasks(subtasks)
    if len(tasks) < 2:
        raise ValueError("fan-out needs at least two subtasks")

    def worker(t: WorkerTask) -> Callable[[Context, ModelBackend], StepOutcome]:
        def handler(ctx: Context, backend: ModelBackend) -> StepOutcome:
            # the worker prompt is built from its own subtask only
            done = backend.complete(f"SUBTASK: {t.prompt}", max_tokens)
            return StepOutcome(done.text, {t.slot: done.text}, done.tokens_in, done.tokens_out)

        return handler

    def gather(ctx: Context, backend: ModelBackend) -> StepOutcome:
        outputs = [b.get(t.slot) for b, t in zip(ctx.branches, tasks)]
        conflicts: list[str] = []
        tokens_in = tokens_out = 0
        if strategy is GatherStrategy.MAJORITY_VOTE:
            aggregate, conflicts = majority_vote(outputs)
        elif strategy is GatherStrategy.STRUCTURED_CONCAT:
            aggregate = structured_concat(outputs)
        else:
            done = backend.complete(f"SYNTHESIZE:\n{structured_concat(outputs)}", max_tokens)
            aggregate, tokens_in, tokens_out = done.text, done.tokens_in, done.tokens_out
        return StepOutcome(
            output=aggregate,
            writes={
                "aggregate": aggregate,
                "conflicts": json.dumps(conflicts),
                "branch_outputs": json.dumps(outputs),
            },
            tokens_in=tokens_in,
            tokens_out=tokens_out,
        )

    branches: list[Any] = []
    for i, t in enumerate(tasks):
        step = Step(f"worker-{i}", "C6", worker(t))
        pre = (extra_steps or {}).get(i)
        branches.append(Chain([pre, step], name=f"branch-{i}") if pre else step)
    return Parallel(branches, Step("gather", "C6", gather), name="fan-out-gather")


def fan_out_gather(
    subtasks: Sequence[str | WorkerTask],
    model: ModelBackend,
    strategy: GatherStrategy | str = GatherStrategy.MAJORITY_VOTE,
    *,
    ledger: TokenLedger | None = None,
    concurrent: bool = False,
) -> GatherResult:
    strategy = GatherStrategy(strategy)
    ledger = ledger if ledger is not None else TokenLedger()
    ctx, trace = execute(fan_out_workflow(subtasks, strategy), Context("fan-out"), ledger, model, concurrent=concurrent)
    worker_tokens = sum(e.tokens for e in ledger.entries if e.step.startswith("worker-"))
    aggregation_tokens = sum(e.tokens for e in ledger.entries if e.step == "gather")
    return GatherResult(
        json.loads(ctx.get("branch_outputs")),
        ctx.get("aggregate"),
        strategy,
        json.loads(ctx.get("conflicts")),
        worker_tokens,
        aggregation_tokens,
        trace,
        ledger,
    )
