"""Pattern selection as a rule engine: Bound, Map, Topology, Select, Impact, Build.

Each law is a small pure function; ``recommend`` composes them and records
which rule fired in ``law_citations``. Domain overlays (fixture-specific
pattern lists) live in ``data/case_studies.json``.
"""

from __future__ import annotations

import json
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

from patternloom.catalog import Catalog, Classification, default_catalog

MINUTE = 60
HOUR = 3600
DAY = 86400
CRITIC_BIAS = 0.2

FOUNDATIONAL = ("Context Triage", "RAG Pipeline", "Complexity-Based Routing", "Generator-Critic")


class Volume(str, Enum):
    SINGLE = "Single"
    MODERATE = "Moderate"
    HIGH = "High"
    STREAM = "Stream"


class Authority(str, Enum):
    ADVISORY_ONLY = "AdvisoryOnly"
    AUTO_LOW_RISK = "AutoLowRisk"
    AUTO_HIGH_RISK = "AutoHighRisk"
    MIXED = "Mixed"


class Asymmetry(str, Enum):
    SYMMETRIC = "Symmetric"
    FALSE_NEGATIVE = "AsymmetricFalseNegative"
    FALSE_POSITIVE = "AsymmetricFalsePositive"


class TimeBand(str, Enum):
    SECONDS = "seconds"
    MINUTES = "minutes"
    HOURS = "hours"
    DAYS = "days"


_ALIASES: dict[type[Enum], dict[str, str]] = {
    Volume: {"single": "Single", "one": "Single", "moderate": "Moderate", "high": "High", "stream": "Stream", "continuous": "Stream"},
    Authority: {
        "advisory": "AdvisoryOnly",
        "advisoryonly": "AdvisoryOnly",
        "recommend": "AdvisoryOnly",
        "auto-low": "AutoLowRisk",
        "autolowrisk": "AutoLowRisk",
        "auto-high": "AutoHighRisk",
        "autohighrisk": "AutoHighRisk",
        "mixed": "Mixed",
    },
    Asymmetry: {
        "symmetric": "Symmetric",
        "false-negative": "AsymmetricFalseNegative",
        "fn": "AsymmetricFalseNegative",
        "asymmetricfalsenegative": "AsymmetricFalseNegative",
        "false-positive": "AsymmetricFalsePositive",
        "fp": "AsymmetricFalsePositive",
        "asymmetricfalsepositive": "AsymmetricFalsePositive",
    },
}


def _enum(cls: type[Enum], value: Any) -> Any:
    if isinstance(value, cls):
        return value
    text = str(value)
    try:
        return cls(text)
    except ValueError:
        pass
    key = _ALIASES.get(cls, {}).get(text.strip().lower())
    if key is None:
        raise ValueError(f"unknown {cls.__name__.lower()} {value!r}")
    return cls(key)


def parse_volume(value: str | int | Volume) -> tuple[Volume, int | None]:
    """A count maps onto a band (1, up to 50, beyond); names pass through."""
    if isinstance(value, int) or (isinstance(value, str) and value.strip().isdigit()):
        n = int(value)
        if n < 1:
            raise ValueError("volume count must be positive")
        band = Volume.SINGLE if n == 1 else Volume.MODERATE if n <= 50 else Volume.HIGH
        return band, n
    return _enum(Volume, value), None


_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(s|sec|secs|seconds?|m|min|mins|minutes?|h|hr|hrs|hours?|d|days?)?\s*$", re.I)


def parse_duration(text: str | float | int) -> float:
    """``"4h"``, ``"5min"``, ``"60s"``, ``"2d"`` or bare seconds."""
    if isinstance(text, (int, float)):
        seconds = float(text)
    else:
        m = _DURATION.match(text)
        if not m:
            raise ValueError(f"cannot parse duration {text!r}")
        unit = (m.group(2) or "s").lower()
        scale = {"s": 1, "m": MINUTE, "h": HOUR, "d": DAY}[unit[0]]
        seconds = float(m.group(1)) * scale
    if seconds <= 0:
        raise ValueError("time budget must be positive")
    return seconds


@dataclass(frozen=True)
class DomainConstraints:
    time_budget: float
    volume: Volume
    authority: Authority
    failure_asymmetry: Asymmetry = Asymmetry.SYMMETRIC
    domain_tag: str | None = None
    volume_count: int | None = None

    def __post_init__(self) -> None:
        if not self.time_budget > 0:
            raise ValueError("time_budget must be positive")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DomainConstraints:
        volume, count = parse_volume(d["volume"])
        return cls(
            parse_duration(d["time_budget"]),
            volume,
            _enum(Authority, d["authority"]),
            _enum(Asymmetry, d.get("failure_asymmetry", "Symmetric")),
            d.get("domain_tag"),
            d.get("volume_count", count),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "time_budget": self.time_budget,
            "volume": self.volume.value,
            "volume_count": self.volume_count,
            "authority": self.authority.value,
            "failure_asymmetry": self.failure_asymmetry.value,
            "domain_tag": self.domain_tag,
        }


# -- the laws -------------------------------------------------------------------


@dataclass(frozen=True)
class ComplexityTier:
    band: TimeBand
    topologies: tuple[str, ...]
    min_patterns: int
    max_patterns: int | None

    @property
    def primary(self) -> str:
        return self.topologies[0]

    def admits(self, count: int) -> bool:
        return count >= self.min_patterns and (self.max_patterns is None or count <= self.max_patterns)

    @property
    def range_text(self) -> str:
        return f"{self.min_patterns}+" if self.max_patterns is None else f"{self.min_patterns}-{self.max_patterns}"


TIERS = {
    TimeBand.SECONDS: ComplexityTier(TimeBand.SECONDS, ("Chain",), 3, 5),
    TimeBand.MINUTES: ComplexityTier(TimeBand.MINUTES, ("Route", "Loop"), 5, 7),
    TimeBand.HOURS: ComplexityTier(TimeBand.HOURS, ("Orchestrate",), 7, 8),
    TimeBand.DAYS: ComplexityTier(TimeBand.DAYS, ("Hierarchy", "Orchestrate"), 10, None),
}
_TOPOLOGY_RANK = {"Chain": 0, "Route": 1, "Loop": 1, "Orchestrate": 2, "Hierarchy": 3}


def time_band(seconds: float) -> TimeBand:
    # 60s itself must land in the seconds band.
    if seconds <= MINUTE:
        return TimeBand.SECONDS
    if seconds <= HOUR:
        return TimeBand.MINUTES
    if seconds < DAY:
        return TimeBand.HOURS
    return TimeBand.DAYS


def law1_complexity(time_budget: float) -> ComplexityTier:
    if not time_budget > 0:
        raise ValueError("time_budget must be positive")
    return TIERS[time_band(time_budget)]


def law2_governance(authority: Authority | str) -> tuple[str, ...]:
    authority = _enum(Authority, authority)
    return {
        Authority.ADVISORY_ONLY: ("Approval Gate",),
        Authority.AUTO_LOW_RISK: ("Blast Radius Control",),
        Authority.AUTO_HIGH_RISK: ("Guardrail Sandwich",),
        Authority.MIXED: ("Approval Gate", "Blast Radius Control", "Guardrail Sandwich"),
    }[authority]


def law3_bias(asymmetry: Asymmetry | str, magnitude: float = CRITIC_BIAS) -> float:
    """Signed shift on critic acceptance: negative makes the critic stricter."""
    asymmetry = _enum(Asymmetry, asymmetry)
    return {Asymmetry.SYMMETRIC: 0.0, Asymmetry.FALSE_NEGATIVE: -magnitude, Asymmetry.FALSE_POSITIVE: magnitude}[asymmetry]


@dataclass(frozen=True)
class Collaboration:
    patterns: tuple[str, ...]
    dispatch: str | None = None
    warning: str | None = None


def law4_collaboration(volume: Volume | str) -> Collaboration:
    volume = _enum(Volume, volume)
    if volume is Volume.MODERATE:
        return Collaboration(("Fan-Out/Gather",))
    if volume is Volume.HIGH:
        return Collaboration(("Fan-Out/Gather", "Hierarchical Delegation"), dispatch="Hierarchy")
    if volume is Volume.STREAM:
        return Collaboration((), dispatch="Route", warning="continuous stream: Route dispatch needs auto-scaling workers")
    return Collaboration(())


def governance_focus(c: DomainConstraints) -> str:
    if c.failure_asymmetry is not Asymmetry.SYMMETRIC:
        return "Asymmetric safety"
    if c.authority is not Authority.ADVISORY_ONLY:
        return "Blast radius"
    if c.volume is Volume.HIGH:
        return "Data isolation"
    return "Audit trail"


# -- overlays and fixtures --------------------------------------------------


@dataclass(frozen=True)
class Overlay:
    patterns: tuple[str, ...]
    editorial: bool = True
    parameters: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)


@dataclass(frozen=True)
class CaseStudyFixture:
    name: str
    constraints: DomainConstraints
    expected: Mapping[str, Any]


@dataclass(frozen=True)
class CaseStudies:
    overlays: Mapping[str, Overlay]
    fixtures: tuple[CaseStudyFixture, ...]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CaseStudies:
        overlays = {
            tag: Overlay(tuple(o["patterns"]), bool(o.get("editorial", True)), o.get("parameters", {}))
            for tag, o in d.get("overlays", {}).items()
        }
        fixtures = tuple(
            CaseStudyFixture(f["name"], DomainConstraints.from_dict(f["constraints"]), dict(f["expected"]))
            for f in d.get("fixtures", [])
        )
        return cls(overlays, fixtures)

    @classmethod
    def load(cls, path: str | Path | None = None) -> CaseStudies:
        if path:
            text = Path(path).read_text()
        else:
            text = resources.files("patternloom").joinpath("data/case_studies.json").read_text()
        return cls.from_dict(json.loads(text))


@lru_cache(maxsize=1)
def default_case_studies() -> CaseStudies:
    return CaseStudies.load()


# -- recommendation -------------------------------------------------------------


@dataclass
class Recommendation:
    primary_topology: str
    pattern_ids: list[str]
    governance_pattern: str
    governance_patterns: list[str]
    governance_focus: str
    critic_bias: float
    law_citations: list[tuple[int, str]]
    warnings: list[str]
    parameters: dict[str, dict[str, Any]]
    skeleton: dict[str, Any]
    tier: ComplexityTier

    @property
    def pattern_count(self) -> int:
        return len(self.pattern_ids)

    def to_dict(self) -> dict[str, Any]:
        return {
            "primary_topology": self.primary_topology,
            "pattern_ids": list(self.pattern_ids),
            "pattern_count": self.pattern_count,
            "governance_pattern": self.governance_pattern,
            "governance_patterns": list(self.governance_patterns),
            "governance_focus": self.governance_focus,
            "critic_bias": self.critic_bias,
            "law_citations": [[n, rule] for n, rule in self.law_citations],
            "warnings": list(self.warnings),
            "parameters": self.parameters,
            "skeleton": self.skeleton,
            "time_band": self.tier.band.value,
            "pattern_range": self.tier.range_text,
        }

    def summary(self) -> str:
        lines = [
            f"topology: {self.primary_topology} ({self.tier.band.value} band, {self.tier.range_text} patterns)",
            f"patterns ({self.pattern_count}): {', '.join(self.pattern_ids)}",
            f"governance: {self.governance_pattern} / focus {self.governance_focus}",
            f"critic bias: {self.critic_bias:+.2f}",
        ]
        lines += [f"law {n}: {rule}" for n, rule in self.law_citations]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def _parameters(c: DomainConstraints, tier: ComplexityTier, bias: float, patterns: list[str], overlay: Overlay | None) -> dict[str, dict[str, Any]]:
    params: dict[str, dict[str, Any]] = {name: {} for name in patterns}
    params["Generator-Critic"].update(max_passes=1 if tier.band is TimeBand.SECONDS else 2, bias=bias)
    params["Complexity-Based Routing"].update(tiers=["System1", "System2", "Extended"] if tier.band in (TimeBand.HOURS, TimeBand.DAYS) else ["System1", "System2"])
    if "Fan-Out/Gather" in params and c.volume_count:
        params["Fan-Out/Gather"].update(items=c.volume_count)
    if overlay:
        for name, extra in overlay.parameters.items():
            if name in params:
                params[name].update(extra)
    return params


def _step(catalog: Catalog, name: str) -> dict[str, Any]:
    entry = catalog.by_name(name)
    assert entry.status is not None
    return {"type": "step", "name": entry.status.id, "function": entry.function.id, "static": name}


def _skeleton(catalog: Catalog, topology: str, patterns: list[str], governance: list[str]) -> dict[str, Any]:
    """A loadable workflow descriptor whose static steps stand in for each pattern."""
    steps = [_step(catalog, p) for p in patterns]
    if topology == "Chain":
        return {"type": "chain", "name": "skeleton", "children": steps}
    if topology in ("Route", "Loop"):
        gov = [s for s, p in zip(steps, patterns) if p in governance]
        rest = [s for s, p in zip(steps, patterns) if p not in governance]
        classifier = {"type": "step", "name": "dispatch", "function": "C3", "static": "auto"}
        return {
            "type": "route",
            "name": "skeleton",
            "classifier": classifier,
            "branches": {"escalate": {"type": "chain", "name": "escalate", "children": gov}},
            "default": {"type": "chain", "name": "auto", "children": rest},
        }
    coordinator = {"type": "step", "name": "coordinate", "function": "C4", "static": "plan"}
    synthesizer = {"type": "step", "name": "synthesize", "function": "C6", "static": "report"}
    if topology == "Orchestrate":
        return {"type": "orchestrate", "name": "skeleton", "coordinator": coordinator, "workers": steps, "synthesizer": synthesizer}
    outer = [s for s, p in zip(steps, patterns) if p in governance or p in FOUNDATIONAL]
    inner = [s for s, p in zip(steps, patterns) if not (p in governance or p in FOUNDATIONAL)] or [
        {"type": "step", "name": "work", "function": "C4", "static": "work"}
    ]
    return {
        "type": "hierarchy",
        "name": "skeleton",
        "levels": [
            {"type": "chain", "name": "oversight", "children": outer},
            {"type": "orchestrate", "name": "delegation", "coordinator": coordinator, "workers": inner, "synthesizer": synthesizer},
        ],
    }


def recommend(
    constraints: DomainConstraints,
    catalog: Catalog | None = None,
    case_studies: CaseStudies | None = None,
) -> Recommendation:
    catalog = catalog or default_catalog()
    studies = case_studies or default_case_studies()
    c = constraints
    citations: list[tuple[int, str]] = []
    warnings: list[str] = []

    # Map: foundational patterns always go in.
    foundational = [e.name for e in catalog.by_classification(Classification.FOUNDATIONAL) if e.name]
    patterns: list[str] = [p for p in FOUNDATIONAL if p in foundational] + [p for p in foundational if p not in FOUNDATIONAL]

    # Topology.
    tier = law1_complexity(c.time_budget)
    citations.append((1, f"{tier.band.value} budget -> {'+'.join(tier.topologies)} ({tier.range_text})"))
    topology = tier.primary
    collab = law4_collaboration(c.volume)
    if collab.dispatch and _TOPOLOGY_RANK[collab.dispatch] != _TOPOLOGY_RANK[topology]:
        if collab.dispatch == "Hierarchy" or c.volume is Volume.STREAM:
            citations.append((4, f"{c.volume.value} volume -> {collab.dispatch} primary"))
            topology = collab.dispatch

    # Select.
    governance = list(law2_governance(c.authority))
    citations.append((2, f"{c.authority.value} -> {', '.join(governance)}"))
    if c.authority is Authority.AUTO_HIGH_RISK and "Blast Radius Control" not in governance:
        governance.append("Blast Radius Control")
        citations.append((2, "autonomous high-risk actions keep Blast Radius Control as containment baseline"))
    if collab.patterns:
        citations.append((4, f"{c.volume.value} volume -> {', '.join(collab.patterns)}"))
    elif c.volume is Volume.SINGLE:
        citations.append((4, "single item -> no collaboration patterns"))
    if collab.warning:
        warnings.append(collab.warning)
        citations.append((4, "stream -> Route dispatch with auto-scaling"))
    overlay = studies.overlays.get(c.domain_tag) if c.domain_tag else None
    if c.domain_tag and overlay is None:
        warnings.append(f"no overlay for domain {c.domain_tag!r}")
    extra = list(overlay.patterns) if overlay else []
    for name in [*governance, *collab.patterns, *extra]:
        if not catalog.has_pattern(name):
            raise KeyError(f"overlay names unknown pattern {name!r}")
        if name not in patterns:
            patterns.append(name)
    if not tier.admits(len(patterns)):
        warnings.append(f"{len(patterns)} patterns outside the {tier.range_text} range for the {tier.band.value} band")

    # Impact.
    bias = law3_bias(c.failure_asymmetry)
    citations.append((3, f"{c.failure_asymmetry.value} -> critic bias {bias:+.2f}"))
    params = _parameters(c, tier, bias, patterns, overlay)
    citations.append((5, "Generator-Critic parameterized per domain"))

    if c.authority is Authority.MIXED:
        primary_gov = "Blast Radius Control"
    else:
        primary_gov = governance[0]
    return Recommendation(
        primary_topology=topology,
        pattern_ids=patterns,
        governance_pattern=primary_gov,
        governance_patterns=governance,
        governance_focus=governance_focus(c),
        critic_bias=bias,
        law_citations=citations,
        warnings=warnings,
        parameters=params,
        skeleton=_skeleton(catalog, topology, patterns, governance),
        tier=tier,
    )


@dataclass(frozen=True)
class FixtureCheck:
    name: str
    passed: bool
    mismatches: tuple[str, ...]
    recommendation: Recommendation

    def to_dict(self) -> dict[str, Any]:
        r = self.recommendation
        return {
            "name": self.name,
            "passed": self.passed,
            "mismatches": list(self.mismatches),
            "topology": r.primary_topology,
            "pattern_count": r.pattern_count,
            "governance_focus": r.governance_focus,
        }


def check_fixture(fixture: CaseStudyFixture, catalog: Catalog | None = None, case_studies: CaseStudies | None = None) -> FixtureCheck:
    rec = recommend(fixture.constraints, catalog, case_studies)
    got = {"topology": rec.primary_topology, "pattern_count": rec.pattern_count, "governance_focus": rec.governance_focus}
    mismatches = tuple(f"{k}: expected {v!r}, got {got[k]!r}" for k, v in fixture.expected.items() if got.get(k) != v)
    return FixtureCheck(fixture.name, not mismatches, mismatches, rec)


def check_fixtures(catalog: Catalog | None = None, case_studies: CaseStudies | None = None) -> list[FixtureCheck]:
    studies = case_studies or default_case_studies()
    return [check_fixture(f, catalog, studies) for f in studies.fixtures]
