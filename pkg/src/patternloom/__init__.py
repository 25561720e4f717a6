"""Executable agent-pattern matrix: topology kernel, pattern catalog, and selection advisor."""

from patternloom.errors import (
    BudgetExceeded,
    BudgetTooSmall,
    CyclicPlan,
    EmptyStore,
    InterdependentSubtasks,
    MalformedTrace,
    MalformedWorkflow,
    PatternloomError,
    StepFailure,
)
from patternloom.kernel import (
    Chain,
    Context,
    Hierarchy,
    Loop,
    Orchestrate,
    Parallel,
    Route,
    Step,
    StepOutcome,
    TokenLedger,
    Trace,
    execute,
    validate,
)
from patternloom.model_backend import Completion, ScriptedModel, tokenize

__version__ = "0.1.0"

__all__ = [
    "BudgetExceeded",
    "BudgetTooSmall",
    "Chain",
    "Completion",
    "Context",
    "CyclicPlan",
    "EmptyStore",
    "Hierarchy",
    "InterdependentSubtasks",
    "Loop",
    "MalformedTrace",
    "MalformedWorkflow",
    "Orchestrate",
    "Parallel",
    "PatternloomError",
    "Route",
    "ScriptedModel",
    "Step",
    "StepFailure",
    "StepOutcome",
    "TokenLedger",
    "Trace",
    "execute",
    "tokenize",
    "validate",
]
