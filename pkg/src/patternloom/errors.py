"""Exception hierarchy. Every domain error maps to CLI exit code 1."""

from __future__ import annotations

from typing import Any


class PatternloomError(Exception):
    """Base class for all domain errors raised by the package."""


class MalformedWorkflow(PatternloomError):
    def __init__(self, violations: list[Any]) -> None:
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"malformed workflow: {lines}")


class BudgetExceeded(PatternloomError):
    """A charge would push a ledger total past its cap.

    ``trace`` and ``ledger`` hold the partial run when raised from ``execute``.
    """

    def __init__(self, message: str, *, trace: Any = None, ledger: Any = None) -> None:
        super().__init__(message)
        self.trace = trace
        self.ledger = ledger


class StepFailure(PatternloomError):
    def __init__(self, step: str, cause: BaseException | str, *, trace: Any = None) -> None:
        self.step = step
        self.cause = cause
        self.trace = trace
        super().__init__(f"step {step!r} failed: {cause}")


class BudgetTooSmall(PatternloomError):
    pass


class EmptyStore(PatternloomError):
    pass


class CyclicPlan(PatternloomError):
    pass


class InterdependentSubtasks(PatternloomError):
    pass


class MalformedTrace(PatternloomError):
    pass
