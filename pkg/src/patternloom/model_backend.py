"""Deterministic stand-in for a language model.

A :class:`ScriptedModel` answers prompts from an ordered rule list. The first
rule whose matcher hits the prompt wins; otherwise the fallback text is
returned. Rules flagged ``perturb`` get a seed-dependent suffix so tests can
tell runs with different seeds apart while staying reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

CHARS_PER_TOKEN = 4


def tokenize(text: str) -> int:
    """Token count of ``text``: characters / 4, rounded up."""
    return math.ceil(len(text) / CHARS_PER_TOKEN)


def truncate_to_tokens(text: str, max_tokens: int) -> str:
    return text[: max_tokens * CHARS_PER_TOKEN]


@dataclass(frozen=True)
class Completion:
    text: str
    tokens_in: int
    tokens_out: int


class ModelBackend(Protocol):
    seed: int

    def complete(self, prompt: str, max_tokens: int = ...) -> Completion: ...


@dataclass(frozen=True)
class ScriptRule:
    match: str
    response: str
    tokens: int | None = None
    regex: bool = False
    perturb: bool = False

    def matches(self, prompt: str) -> bool:
        if self.regex:
            return re.search(self.match, prompt) is not None
        return self.match in prompt

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"match": self.match, "response": self.response}
        if self.tokens is not None:
            out["tokens"] = self.tokens
        if self.regex:
            out["regex"] = True
        if self.perturb:
            out["perturb"] = True
        return out


def _perturbation(seed: int, prompt: str) -> str:
    digest = hashlib.sha256(f"{seed}\x00{prompt}".encode()).hexdigest()
    return f" ~{digest[:6]}"


@dataclass(frozen=True)
class ScriptedModel:
    rules: tuple[ScriptRule, ...] = ()
    fallback: str = "I don't know."
    seed: int = 0
    name: str = "scripted"

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))

    def rule_for(self, prompt: str) -> ScriptRule | None:
        for rule in self.rules:
            if rule.matches(prompt):
                return rule
        return None

    def complete(self, prompt: str, max_tokens: int = 1024) -> Completion:
        if max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        rule = self.rule_for(prompt)
        if rule is None:
            text = self.fallback
        else:
            text = rule.response
            if rule.perturb:
                text += _perturbation(self.seed, prompt)
            if rule.tokens is not None:
                # the rule's own length cap
                text = truncate_to_tokens(text, rule.tokens)
        text = truncate_to_tokens(text, max_tokens)
        return Completion(text=text, tokens_in=tokenize(prompt), tokens_out=tokenize(text))

    def with_seed(self, seed: int) -> ScriptedModel:
        return ScriptedModel(self.rules, self.fallback, seed, self.name)

    def extended(self, *rules: ScriptRule, first: bool = True) -> ScriptedModel:
        new = tuple(rules) + self.rules if first else self.rules + tuple(rules)
        return ScriptedModel(new, self.fallback, self.seed, self.name)

    @classmethod
    def from_rules(
        cls, rules: list[dict[str, Any]], *, fallback: str = "I don't know.", seed: int = 0
    ) -> ScriptedModel:
        parsed = tuple(
            ScriptRule(
                match=r["match"],
                response=r["response"],
                tokens=r.get("tokens"),
                regex=bool(r.get("regex", False)),
                perturb=bool(r.get("perturb", False)),
            )
            for r in rules
        )
        return cls(parsed, fallback, seed)

    @classmethod
    def load(cls, path: str | Path, *, seed: int = 0) -> ScriptedModel:
        """Load a script file: a JSON list of ``{match, response, tokens}`` objects.

        An object form ``{"rules": [...], "fallback": "..."}`` is also accepted.
        """
        data = json.loads(Path(path).read_text())
        if isinstance(data, dict):
            return cls.from_rules(data["rules"], fallback=data.get("fallback", "I don't know."), seed=seed)
        return cls.from_rules(data, seed=seed)

    def dump(self) -> dict[str, Any]:
        """The object form accepted by :meth:`load`."""
        return {"rules": [r.to_dict() for r in self.rules], "fallback": self.fallback}
