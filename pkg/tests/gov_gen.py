"""Governance fixtures: a six-rule deny/allow set and random containment hierarchies."""

from __future__ import annotations

import random

from patternloom.governance import (
    ActionRequest,
    Condition,
    ContainmentGuard,
    ContainmentHierarchy,
    ContainmentLevel,
    Impact,
    Reversibility,
    Rule,
)


def act(rev: str = "Reversible", imp: str = "Low", tool: str = "write", **args) -> ActionRequest:
    return ActionRequest(tool, Reversibility(rev), Impact(imp), args)


def rule(rule_id: str, **eq) -> Rule:
    return Rule(rule_id, tuple(Condition(k, "eq", v) for k, v in eq.items()))


# Six rules over the classification space; three deny, three allow.
FIXTURE_DENY = [
    rule("d-irrev-high", reversibility="Irreversible", impact="High"),
    rule("d-high", impact="High"),
    rule("d-irrev-med", reversibility="Irreversible", impact="Medium"),
]
FIXTURE_ALLOW = [
    rule("a-rev-low", reversibility="Reversible", impact="Low"),
    rule("a-low", impact="Low"),
    rule("a-high", impact="High"),
]


PATHS = ["/", "/w", "/w/a", "/w/a/b", "/w/c", "/t", "/t/x"]
HOSTS = ["a", "b", "c", "d"]


def random_level(rnd: random.Random, name: str) -> ContainmentLevel:
    def maybe(value):
        return value if rnd.random() < 0.6 else None

    return ContainmentLevel(
        name,
        maybe(tuple(rnd.sample(PATHS, rnd.randint(0, 3)))),
        maybe(frozenset(rnd.sample(HOSTS, rnd.randint(0, 4)))),
        maybe(rnd.randint(1, 8)),
        maybe(float(rnd.randint(0, 40))),
    )


def random_hierarchy(rnd: random.Random) -> ContainmentHierarchy:
    return ContainmentHierarchy(tuple(random_level(rnd, f"l{i}") for i in range(rnd.randint(1, 5))))


def random_action(rnd: random.Random) -> ActionRequest:
    args: dict = {"cost": float(rnd.randint(0, 12))}
    if rnd.random() < 0.7:
        args["path"] = rnd.choice(PATHS + ["/w/a/b/deep", "/wa", "/x"])
    if rnd.random() < 0.7:
        args["host"] = rnd.choice(HOSTS + ["e"])
    return act(**args)


def effective_law_holds(h: ContainmentHierarchy, rnd: random.Random, steps: int = 10) -> bool:
    """Coordinate-wise min oracle, then the same admit sequence as the single effective level."""
    eff = h.effective()
    rates = [lv.rate_limit for lv in h.levels if lv.rate_limit is not None]
    budgets = [lv.budget_cap for lv in h.levels if lv.budget_cap is not None]
    hosts = [lv.network_allowlist for lv in h.levels if lv.network_allowlist is not None]
    if eff.rate_limit != (min(rates) if rates else None):
        return False
    if eff.budget_cap != (min(budgets) if budgets else None):
        return False
    if eff.network_allowlist != (frozenset.intersection(*hosts) if hosts else None):
        return False
    nested, single = ContainmentGuard(h), ContainmentGuard(ContainmentHierarchy((eff,)))
    for _ in range(steps):
        a = random_action(rnd)
        if nested.admit(a).permitted != single.admit(a).permitted:
            return False
    return nested.usage == single.usage
