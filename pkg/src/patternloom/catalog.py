"""The 7x6 pattern matrix, loaded from ``data/catalog.json``.

Set ``PATTERNLOOM_CATALOG`` to point at an alternative catalog file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

CATALOG_ENV = "PATTERNLOOM_CATALOG"


class Classification(str, Enum):
    FOUNDATIONAL = "foundational"
    CONDITIONAL = "conditional"
    UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class CognitiveFunction:
    id: str
    name: str
    core_question: str


@dataclass(frozen=True)
class TopologyArchetype:
    id: str
    name: str
    structure: str


@dataclass(frozen=True)
class Named:
    id: str
    name: str
    original: bool
    synopsis: str
    label: str = ""


@dataclass(frozen=True)
class PatternEntry:
    function: CognitiveFunction
    topology: TopologyArchetype
    status: Named | None
    classification: Classification = Classification.UNCLASSIFIED
    executable: bool = False

    @property
    def coordinate(self) -> tuple[str, str]:
        return (self.function.id, self.topology.id)

    @property
    def is_named(self) -> bool:
        return self.status is not None

    @property
    def name(self) -> str | None:
        return self.status.name if self.status else None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "function": self.function.id,
            "topology": self.topology.id,
            "status": "named" if self.status else "empty",
        }
        if self.status:
            out.update(
                id=self.status.id,
                name=self.status.name,
                label=self.status.label,
                original=self.status.original,
                synopsis=self.status.synopsis,
                classification=self.classification.value,
                executable=self.executable,
            )
        return out


@dataclass(frozen=True)
class OrthogonalityReport:
    per_topology: dict[str, frozenset[str]]
    per_function: dict[str, frozenset[str]]
    fill_ratio: Fraction
    named: int
    original: int
    empty: int
    flags: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_topology": {t: sorted(fs) for t, fs in self.per_topology.items()},
            "per_function": {c: sorted(ts) for c, ts in self.per_function.items()},
            "fill_ratio": float(self.fill_ratio),
            "fill": f"{self.named}/{self.named + self.empty}",
            "named": self.named,
            "original": self.original,
            "empty": self.empty,
            "flags": list(self.flags),
        }


class Catalog:
    def __init__(
        self,
        functions: list[CognitiveFunction],
        topologies: list[TopologyArchetype],
        entries: list[PatternEntry],
    ) -> None:
        self.functions = {f.id: f for f in functions}
        self.topologies = {t.id: t for t in topologies}
        self.entries = list(entries)
        self._by_coord = {e.coordinate: e for e in entries}
        self._by_name = {e.status.name: e for e in entries if e.status}
        self._by_id = {e.status.id: e for e in entries if e.status}
        if len(self._by_coord) != len(entries):
            raise ValueError("catalog has duplicate coordinates")
        expected = {(c, t) for c in self.functions for t in self.topologies}
        if set(self._by_coord) != expected:
            raise ValueError("catalog must hold exactly one entry per coordinate")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Catalog:
        functions = [CognitiveFunction(f["id"], f["name"], f["core_question"]) for f in data["functions"]]
        topologies = [TopologyArchetype(t["id"], t["name"], t["structure"]) for t in data["topologies"]]
        fmap = {f.id: f for f in functions}
        tmap = {t.id: t for t in topologies}
        entries = []
        for cell in data["cells"]:
            status = None
            classification = Classification.UNCLASSIFIED
            executable = False
            if cell["status"] == "named":
                status = Named(cell["id"], cell["name"], bool(cell["original"]), cell.get("synopsis", ""), cell.get("label", ""))
                classification = Classification(cell.get("classification", "unclassified"))
                executable = bool(cell.get("executable", False))
            elif cell.get("executable"):
                raise ValueError(f"empty cell {cell['function']}x{cell['topology']} cannot be executable")
            entries.append(PatternEntry(fmap[cell["function"]], tmap[cell["topology"]], status, classification, executable))
        return cls(functions, topologies, entries)

    @classmethod
    def load(cls, path: str | Path | None = None) -> Catalog:
        path = path or os.environ.get(CATALOG_ENV)
        if path:
            text = Path(path).read_text()
        else:
            text = resources.files("patternloom").joinpath("data/catalog.json").read_text()
        return cls.from_dict(json.loads(text))

    # queries

    def lookup(self, function: str, topology: str) -> PatternEntry:
        try:
            return self._by_coord[(function.upper(), topology.upper())]
        except KeyError:
            raise KeyError(f"no such coordinate: {function} x {topology}") from None

    def by_name(self, name: str) -> PatternEntry:
        entry = self._by_name.get(name) or self._by_id.get(name)
        if entry is None:
            raise KeyError(f"unknown pattern {name!r}")
        return entry

    def has_pattern(self, name: str) -> bool:
        return name in self._by_name or name in self._by_id

    def named(self) -> list[PatternEntry]:
        return [e for e in self.entries if e.status]

    def patterns_by_topology(self, topology: str) -> list[PatternEntry]:
        if topology not in self.topologies:
            raise KeyError(f"unknown topology {topology!r}")
        return [e for e in self.named() if e.topology.id == topology]

    def patterns_by_function(self, function: str) -> list[PatternEntry]:
        if function not in self.functions:
            raise KeyError(f"unknown cognitive function {function!r}")
        return [e for e in self.named() if e.function.id == function]

    def by_classification(self, classification: Classification) -> list[PatternEntry]:
        return [e for e in self.named() if e.classification is classification]

    def orthogonality_report(self) -> OrthogonalityReport:
        per_topology = {t: frozenset(e.function.id for e in self.patterns_by_topology(t)) for t in self.topologies}
        per_function = {c: frozenset(e.topology.id for e in self.patterns_by_function(c)) for c in self.functions}
        flags = [f"topology {t} serves {len(fs)} function(s)" for t, fs in per_topology.items() if len(fs) < 2]
        flags += [f"function {c} is served by {len(ts)} topology(ies)" for c, ts in per_function.items() if len(ts) < 2]
        named = self.named()
        return OrthogonalityReport(
            per_topology=per_topology,
            per_function=per_function,
            fill_ratio=Fraction(len(named), len(self.entries)),
            named=len(named),
            original=sum(1 for e in named if e.status and e.status.original),
            empty=len(self.entries) - len(named),
            flags=tuple(flags),
        )


@lru_cache(maxsize=1)
def default_catalog() -> Catalog:
    return Catalog.load()


def lookup(function: str, topology: str) -> PatternEntry:
    return default_catalog().lookup(function, topology)


def patterns_by_topology(topology: str) -> list[PatternEntry]:
    return default_catalog().patterns_by_topology(topology)


def patterns_by_function(function: str) -> list[PatternEntry]:
    return default_catalog().patterns_by_function(function)


def orthogonality_report() -> OrthogonalityReport:
    return default_catalog().orthogonality_report()
